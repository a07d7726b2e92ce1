"""Coverage-guided time scheduling of fuzz drivers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .coverage import CoverageLedger, SequenceHistory, avg_cov, ingest_coverage, novelty
from .errors import BudgetExhausted, CoverageFormatError, ExecutorError
from .executor import DriverExecutor, ExecutionResult
from .synthesis import DriverState, FuzzDriver
from .triage import RawCrash

log = logging.getLogger(__name__)

EPS = 1e-9


@dataclass
class SchedulerConfig:
    theta: float = 0.9
    beta: float = 0.2
    base: float = 2.0
    alpha_min: float = 0.5
    alpha_max: float = 2.0
    total_budget: float = 3600.0
    quantum: float = 1.0

    def __post_init__(self) -> None:
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.base <= 0:
            raise ValueError("base must be positive")
        if not 0 < self.alpha_min <= self.alpha_max:
            raise ValueError("need 0 < alpha_min <= alpha_max")
        if self.total_budget <= 0:
            raise ValueError("total_budget must be positive")
        if self.quantum < 0:
            raise ValueError("quantum must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "SchedulerConfig":
        from .config import parse_duration

        d = dict(d or {})
        if "total_budget" in d:
            d["total_budget"] = parse_duration(d["total_budget"])
        return cls(**d)


@dataclass(frozen=True)
class ScheduleDecision:
    driver_id: str
    action: str  # "skip" | "execute"
    alpha_t: float
    base_time: float
    omega_novelty: float
    assigned_time: float
    avg_cov: float

    def __post_init__(self) -> None:
        if self.action not in ("skip", "execute"):
            raise ValueError(f"unknown action {self.action!r}")
        if self.action == "skip" and self.assigned_time != 0:
            raise ValueError("a skipped driver gets no time")
        if self.assigned_time < 0:
            raise ValueError("assigned time must be non-negative")

    def to_json(self) -> dict[str, Any]:
        return {
            "driver": self.driver_id, "action": self.action, "alpha_t": self.alpha_t,
            "base_time": self.base_time, "omega": self.omega_novelty,
            "assigned_time": self.assigned_time, "avg_cov": self.avg_cov,
        }


def time_coefficient(i: int, n: int, cfg: SchedulerConfig) -> float:
    """clamp(B ** (i/n - 1), alpha_min, alpha_max)."""
    if n < 1 or not 0 <= i < n:
        raise ValueError(f"driver index {i} outside 0..{n - 1}")
    return min(max(cfg.base ** (i / n - 1.0), cfg.alpha_min), cfg.alpha_max)


@dataclass
class CampaignState:
    ledger: CoverageLedger
    history: SequenceHistory
    remaining: float
    n_drivers: int
    weights: dict[str, float] = field(default_factory=dict)
    consumed: float = 0.0
    next_index: int = 0
    executed_apis: list[list[str]] = field(default_factory=list)
    entries: list[dict[str, Any]] = field(default_factory=list)
    curve: list[tuple[float, int]] = field(default_factory=list)
    crashes: list[RawCrash] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "ledger": self.ledger.to_json(),
            "history": self.history.to_json(),
            "remaining": self.remaining,
            "n_drivers": self.n_drivers,
            "weights": self.weights,
            "consumed": self.consumed,
            "next_index": self.next_index,
            "executed_apis": self.executed_apis,
            "entries": self.entries,
            "curve": [list(p) for p in self.curve],
            "crashes": [
                {"driver": c.driver_id, "input": c.input.hex(), "report": c.report,
                 "artifact": c.artifact, "at": c.at}
                for c in self.crashes
            ],
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "CampaignState":
        return cls(
            ledger=CoverageLedger.from_json(d["ledger"]),
            history=SequenceHistory.from_json(d["history"]),
            remaining=d["remaining"], n_drivers=d["n_drivers"], weights=dict(d["weights"]),
            consumed=d["consumed"], next_index=d["next_index"],
            executed_apis=[list(x) for x in d["executed_apis"]], entries=list(d["entries"]),
            curve=[(t, n) for t, n in d["curve"]],
            crashes=[RawCrash(c["driver"], bytes.fromhex(c["input"]), c["report"], c.get("artifact"), c["at"])
                     for c in d["crashes"]],
        )


def assign_time(driver: FuzzDriver, idx: int, state: CampaignState, cfg: SchedulerConfig) -> ScheduleDecision:
    """Skip saturated drivers; otherwise
    ``t_assign = (T/|D| * alpha_t) / max(avgCov, beta) * omega``, floored at
    one quantum when positive and capped at the remaining budget."""
    if state.remaining <= EPS:
        raise BudgetExhausted(f"no budget left for {driver.id}")
    cov = avg_cov(set(driver.sequence), state.ledger)
    if cov > cfg.theta:
        return ScheduleDecision(driver.id, "skip", 0.0, 0.0, 0.0, 0.0, cov)
    alpha = time_coefficient(idx, state.n_drivers, cfg)
    t = state.remaining / state.n_drivers * alpha
    omega = novelty(driver.tokens, state.history, state.weights) if driver.sequence else 1.0
    assigned = t / max(cov, cfg.beta) * omega
    if assigned > 0:
        assigned = max(assigned, cfg.quantum)
    assigned = min(assigned, state.remaining)
    return ScheduleDecision(driver.id, "execute", alpha, t, omega, assigned, cov)


# Returns the compiled child (or None) and a log record of the mutation.
Mutator = Callable[[FuzzDriver, CampaignState], "tuple[FuzzDriver | None, dict[str, Any] | None]"]


def _run_one(
    driver: FuzzDriver, budget: float, executor: DriverExecutor, state: CampaignState, root: str | None
) -> tuple[ExecutionResult | None, int]:
    try:
        res = executor.execute(driver, budget)
    except ExecutorError as exc:
        log.warning("%s: executor failure, retiring: %s", driver.id, exc)
        driver.transition(DriverState.RETIRED)
        return None, 0
    state.remaining -= res.t_actual
    state.consumed += res.t_actual
    new = frozenset()
    if res.coverage_report is not None:
        try:
            new, _ = ingest_coverage(res.coverage_report, state.ledger, driver_id=driver.id,
                                     at=state.consumed, root=root)
        except CoverageFormatError as exc:
            log.warning("%s: coverage report rejected: %s", driver.id, exc)
    state.curve.append((round(state.consumed, 9), len(state.ledger.global_branches)))
    for c in res.crashes:
        c.at = round(state.consumed, 9)
        state.crashes.append(c)
    driver.transition(DriverState.EXECUTED)
    state.history.add(driver.id, driver.tokens)
    state.executed_apis.append(sorted(set(driver.sequence)))
    return res, len(new)


def _run_record(driver: FuzzDriver, budget: float, res: ExecutionResult | None, new: int) -> dict[str, Any]:
    return {
        "driver": driver.id,
        "budget": budget,
        "t_actual": round(res.t_actual, 9) if res else 0.0,
        "new_branches": new,
        "executions": res.executions if res else 0,
        "crashes": len(res.crashes) if res else 0,
        "status": (res.exit_reason if res else "executor_error"),
    }


def run_campaign(
    drivers: Sequence[FuzzDriver],
    executor: DriverExecutor,
    cfg: SchedulerConfig,
    state: CampaignState,
    *,
    mutate: Mutator | None = None,
    on_iteration: Callable[[CampaignState], None] | None = None,
    root: str | None = None,
) -> str:
    """Schedule ``drivers`` in order starting at ``state.next_index``.
    Returns ``"completed"`` or ``"budget_exhausted"``."""
    n = len(drivers)
    while state.next_index < n:
        i = state.next_index
        driver = drivers[i]
        entry: dict[str, Any] = {"index": i, "driver": driver.id, "target": driver.target_api}
        if driver.state != DriverState.COMPILED:
            entry["decision"] = None
            entry["note"] = f"not schedulable in state {driver.state.value}"
            state.entries.append(entry)
            state.next_index += 1
            if on_iteration:
                on_iteration(state)
            continue
        try:
            decision = assign_time(driver, i, state, cfg)
        except BudgetExhausted:
            return "budget_exhausted"
        entry["decision"] = decision.to_json()
        entry["runs"] = []
        if decision.action == "execute" and decision.assigned_time > 0:
            res, new = _run_one(driver, decision.assigned_time, executor, state, root)
            entry["runs"].append(_run_record(driver, decision.assigned_time, res, new))
            if res is not None and new == 0 and mutate is not None and state.remaining > EPS:
                child, record = mutate(driver, state)
                entry["mutation"] = record
                if child is not None and child.state == DriverState.COMPILED:
                    budget = min(decision.assigned_time, state.remaining)
                    res2, new2 = _run_one(child, budget, executor, state, root)
                    entry["runs"].append(_run_record(child, budget, res2, new2))
                    entry["child"] = child.id
        state.entries.append(entry)
        state.next_index += 1
        if on_iteration:
            on_iteration(state)
        if state.remaining <= EPS and state.next_index < n:
            return "budget_exhausted"
    return "completed"
