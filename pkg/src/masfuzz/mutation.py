"""Energy-guided sequence mutation of drivers that stopped finding coverage."""

from __future__ import annotations

import enum
import logging
import random
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from .coverage import CoverageLedger
from .metainfo import LibraryModel
from .oracles import ChatOracle
from .sequences import ApiSequence, SequencePool
from .synthesis import DriverState, FuzzDriver, is_subsequence, regenerate_for_sequence

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    INSERT = "Insert"
    REPLACE = "Replace"
    COMBINE = "Combine"


@dataclass(frozen=True)
class ApiEnergy:
    api: str
    cov: float
    freq: float
    potential: int
    energy: float


def energy_of(cov: float, freq: float, potential: int) -> float:
    return (1.0 - cov) * (1.0 - freq) * potential


def compute_energy(
    ledger: CoverageLedger,
    executed: Sequence[Iterable[str]],
    pool: SequencePool,
    apis: Iterable[str],
) -> dict[str, ApiEnergy]:
    """Energy of every API.  ``executed`` holds the API set of each executed
    driver; freq is the share of those drivers that invoke the API."""
    sets = [set(s) for s in executed]
    n = len(sets)
    out = {}
    for api in sorted(apis):
        cov = ledger.cov(api)
        freq = sum(api in s for s in sets) / n if n else 0.0
        pot = pool.potential(api)
        out[api] = ApiEnergy(api, cov, freq, pot, energy_of(cov, freq, pot))
    return out


# -- sequence algebra -----------------------------------------------------------------


def insert(seq: Sequence[str], injected: Sequence[str], boundary: int) -> tuple[str, ...]:
    if not 0 <= boundary <= len(seq):
        raise ValueError(f"boundary {boundary} outside 0..{len(seq)}")
    return tuple(seq[:boundary]) + tuple(injected) + tuple(seq[boundary:])


def replace(seq: Sequence[str], injected: Sequence[str], start: int, end: int) -> tuple[str, ...]:
    if not 0 <= start < end <= len(seq):
        raise ValueError(f"span [{start}, {end}) is not a non-empty slice of 0..{len(seq)}")
    return tuple(seq[:start]) + tuple(injected) + tuple(seq[end:])


def combine(seq: Sequence[str], injected: Sequence[str]) -> tuple[str, ...]:
    return tuple(seq) + tuple(injected)


@dataclass(frozen=True)
class MutationPlan:
    driver_id: str
    strategy: Strategy
    pivot_api: str
    injected_sequence: str
    injected_apis: tuple[str, ...]
    position: int | None = None
    span: tuple[int, int] | None = None

    def target_sequence(self, parent: Sequence[str]) -> tuple[str, ...]:
        if self.strategy is Strategy.INSERT:
            return insert(parent, self.injected_apis, self.position or 0)
        if self.strategy is Strategy.REPLACE:
            assert self.span is not None
            return replace(parent, self.injected_apis, *self.span)
        return combine(parent, self.injected_apis)

    def to_json(self) -> dict[str, Any]:
        return {
            "driver": self.driver_id, "strategy": self.strategy.value, "pivot": self.pivot_api,
            "injected_sequence": self.injected_sequence, "injected_apis": list(self.injected_apis),
            "position": self.position, "span": list(self.span) if self.span else None,
        }


def insert_boundary(
    parent: Sequence[str], first: str, predecessors: Mapping[str, Iterable[str]]
) -> int:
    """Earliest boundary after which ``first`` has a (type or semantic)
    predecessor already called; 0 when there is none."""
    preds = set(predecessors.get(first, ()))
    for k, api in enumerate(parent):
        if api in preds:
            return k + 1
    return 0


def plan_mutation(
    driver: FuzzDriver,
    energies: Mapping[str, ApiEnergy],
    pool: SequencePool,
    rng: random.Random,
    predecessors: Mapping[str, Iterable[str]] | None = None,
) -> MutationPlan | None:
    """Pivot on the highest-energy API that still has an unused sequence
    (ties by name) and pick a strategy uniformly.  Returns None when no API
    has an unused sequence left."""
    candidates = [e for e in energies.values() if pool.best_unused(e.api) is not None]
    if not candidates:
        return None
    pivot = min(candidates, key=lambda e: (-e.energy, e.api))
    seq = pool.best_unused(pivot.api)
    assert seq is not None
    strategy = rng.choice(list(Strategy))
    parent = driver.sequence
    position = span = None
    if strategy is Strategy.INSERT:
        position = insert_boundary(parent, seq.apis[0], predecessors or {})
    elif strategy is Strategy.REPLACE:
        if not parent:
            strategy = Strategy.COMBINE
        else:
            n = len(parent)
            spans = [(i, j) for i in range(n) for j in range(i + 1, n + 1)]
            span = spans[rng.randrange(len(spans))]
    return MutationPlan(driver.id, strategy, pivot.api, seq.id, seq.apis, position, span)


def apply_mutation(
    driver: FuzzDriver,
    plan: MutationPlan,
    oracle: ChatOracle,
    pool: SequencePool,
    model: LibraryModel,
    child_id: str,
) -> FuzzDriver:
    """Claim the injected sequence, build the mutated target sequence and
    have the oracle regenerate a driver realizing it.  The regenerated
    source must contain the target sequence (checked once more after one
    retry); otherwise the child is retired and the parent too."""
    if driver.mutations >= 1:
        raise ValueError(f"{driver.id} was already mutated once")
    injected: ApiSequence = pool.claim(plan.injected_sequence)
    target = plan.target_sequence(driver.sequence)
    driver.transition(DriverState.MUTATED)
    driver.mutations += 1
    child: FuzzDriver | None = None
    note = f"Mutation strategy {plan.strategy.value} around {plan.pivot_api}."
    for attempt in range(2):
        child = regenerate_for_sequence(driver, target, oracle, model, child_id, note)
        if child is None:
            continue
        from .synthesis import extract_driver_sequence

        child.sequence = extract_driver_sequence(child.source, model.names)
        if is_subsequence(target, child.sequence):
            break
        log.info("%s: regenerated driver misses the planned sequence (attempt %d)", child_id, attempt + 1)
        child = None
    if child is None:
        child = FuzzDriver(child_id, driver.target_api, "", dict(driver.sequences_used), lineage=driver.id)
        child.transition(DriverState.RETIRED)
        driver.transition(DriverState.RETIRED)
        return child
    parent_tags = dict(zip(driver.sequence, driver.tags))
    dim = injected.dimension.value
    child.tags = tuple(
        dim if api in injected.apis and api not in parent_tags else parent_tags.get(api, dim)
        for api in child.sequence
    )
    child.sequences_used = dict(driver.sequences_used) | {f"mutation:{dim}": injected.id}
    return child
