# %% [markdown]
# # How the scheduler splits a time budget
#
# Each driver gets `T_rem / n * alpha / max(cov, beta) * omega` seconds, where
# `alpha` grows with the driver's position in the queue. Drivers whose APIs are
# already well covered are skipped outright.

# %%
from masfuzz.coverage import SIM_FORMAT, CoverageLedger, SequenceHistory, ingest_coverage
from masfuzz.scheduler import CampaignState, SchedulerConfig, assign_time, time_coefficient
from masfuzz.synthesis import DriverState, FuzzDriver

cfg = SchedulerConfig(total_budget=1200)
print([round(time_coefficient(i, 4, cfg), 4) for i in range(4)])

# %% [markdown]
# One API with 1 of 10 branches covered, 1200 s left and four drivers queued.

# %%
ledger = CoverageLedger({"api": 10}, spans={"lib.c": [(1, 99, "api")]})
ingest_coverage({"format": SIM_FORMAT, "branches": ["lib.c:1:0"]}, ledger)
state = CampaignState(ledger, SequenceHistory(), 1200.0, 4)
drv = FuzzDriver("d0001", "api", "", state=DriverState.COMPILED, sequence=("api",), tags=("MP",))
for i in range(4):
    d = assign_time(drv, i, state, cfg)
    print(i, d.action, round(d.assigned_time, 2))

# %% [markdown]
# Push coverage past theta and the same driver is skipped.

# %%
ingest_coverage({"format": SIM_FORMAT, "branches": [f"lib.c:{k}:0" for k in range(2, 11)]}, ledger)
print(assign_time(drv, 0, state, cfg))
