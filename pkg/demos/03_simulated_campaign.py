# %% [markdown]
# # A full campaign under the simulator
#
# The pipeline mines, synthesizes, schedules, triages and reports. With
# `executor.kind: simulated` no compiler is needed: coverage and crashes follow
# a seeded model of the library, so two runs with one seed give identical bytes.

# %%
import json
import tempfile
from pathlib import Path

import yaml

from masfuzz import pipeline
from masfuzz.config import CampaignConfig

ROOT = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "miniplist"
work = Path(tempfile.mkdtemp(prefix="masfuzz-demo-"))
conf = work / "campaign.yaml"
conf.write_text(yaml.safe_dump({
    "library": {"root": str(ROOT)},
    "workdir": str(work / "work"),
    "rng_seed": 1,
    "oracles": "stub",
    "executor": {"kind": "simulated", "simspec": "auto"},
    "scheduler": {"total_budget": 300},
}))

# %%
rep = pipeline.run(CampaignConfig.load(conf))
print(rep["status"], rep["budget"])
print((work / "work" / "report.txt").read_text())

# %% [markdown]
# The coverage curve is a plain CSV, one row per scheduler step.

# %%
print("\n".join((work / "work" / "coverage_curve.csv").read_text().splitlines()[:8]))
print(json.dumps(rep["crashes"]["summary"], indent=2))
