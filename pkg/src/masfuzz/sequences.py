"""API sequence pools: usage-example (UE) and type-compatibility (MP) mining.

Semantic (SEM) sequences live in :mod:`masfuzz.semantics`; all three kinds
share the :class:`ApiSequence` record and the :class:`SequencePool` store.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from . import _cparse as cp
from .errors import TypeNormalizationError
from .metainfo import ApiMetainfo, LibraryModel, NormalizedType, TypeTable, normalize_type

log = logging.getLogger(__name__)

SCHEMA = "masfuzz.sequences/1"


class Dimension(str, enum.Enum):
    UE = "UE"
    MP = "MP"
    SEM = "SEM"


def sequence_id(dimension: Dimension | str, apis: Iterable[str]) -> str:
    dim = Dimension(dimension).value
    digest = hashlib.sha1("\x1f".join(apis).encode()).hexdigest()[:12]
    return f"{dim.lower()}-{digest}"


@dataclass
class ApiSequence:
    apis: tuple[str, ...]
    dimension: Dimension
    provenance: dict[str, Any] = field(default_factory=dict)
    used: bool = False

    def __post_init__(self) -> None:
        self.apis = tuple(self.apis)
        self.dimension = Dimension(self.dimension)

    @property
    def id(self) -> str:
        return sequence_id(self.dimension, self.apis)

    def __len__(self) -> int:
        return len(self.apis)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "dimension": self.dimension.value,
            "apis": list(self.apis),
            "provenance": self.provenance,
            "used": self.used,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "ApiSequence":
        return cls(tuple(d["apis"]), Dimension(d["dimension"]), d.get("provenance", {}), bool(d.get("used")))


class SequencePool:
    """All mined sequences, keyed by id.  ``claim`` is the single
    serialization point for the used flag."""

    def __init__(self, sequences: Iterable[ApiSequence] = ()):
        self._seqs: dict[str, ApiSequence] = {}
        self._lock = threading.Lock()
        for s in sequences:
            self.add(s)

    def add(self, seq: ApiSequence) -> ApiSequence:
        """Insert ``seq`` unless an identical (dimension, apis) entry exists."""
        return self._seqs.setdefault(seq.id, seq)

    def extend(self, seqs: Iterable[ApiSequence]) -> None:
        for s in seqs:
            self.add(s)

    def __iter__(self) -> Iterator[ApiSequence]:
        return iter(self._seqs.values())

    def __len__(self) -> int:
        return len(self._seqs)

    def __getitem__(self, seq_id: str) -> ApiSequence:
        return self._seqs[seq_id]

    def __contains__(self, seq_id: object) -> bool:
        return seq_id in self._seqs

    def of(self, dimension: Dimension) -> list[ApiSequence]:
        return [s for s in self._seqs.values() if s.dimension == dimension]

    def containing(self, api: str, *, unused_only: bool = False) -> list[ApiSequence]:
        return [s for s in self._seqs.values() if api in s.apis and not (unused_only and s.used)]

    def potential(self, api: str) -> int:
        """Number of distinct sequences (any dimension) containing ``api``."""
        return sum(1 for s in self._seqs.values() if api in s.apis)

    def best_unused(self, api: str, dimension: Dimension | None = None) -> ApiSequence | None:
        """Longest unused sequence containing ``api``; ties by api list."""
        cands = [
            s for s in self._seqs.values()
            if not s.used and api in s.apis and (dimension is None or s.dimension == dimension)
        ]
        if not cands:
            return None
        return min(cands, key=lambda s: (-len(s), s.apis, s.dimension.value))

    def claim(self, seq_id: str) -> ApiSequence:
        """Mark a sequence used; a sequence can be claimed only once."""
        with self._lock:
            seq = self._seqs[seq_id]
            if seq.used:
                raise ValueError(f"sequence {seq_id} already consumed")
            seq.used = True
            return seq

    def claim_best(self, api: str, dimension: Dimension) -> ApiSequence | None:
        with self._lock:
            seq = self.best_unused(api, dimension)
            if seq is not None:
                seq.used = True
            return seq

    def stats(self) -> dict[str, dict[str, float]]:
        out = {}
        for dim in Dimension:
            seqs = self.of(dim)
            out[dim.value] = {
                "count": len(seqs),
                "used": sum(s.used for s in seqs),
                "mean_length": round(sum(map(len, seqs)) / len(seqs), 6) if seqs else 0.0,
                "max_length": max(map(len, seqs), default=0),
            }
        return out

    def to_json(self) -> dict[str, Any]:
        return {"schema": SCHEMA, "sequences": [s.to_json() for s in self._seqs.values()]}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "SequencePool":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"not a sequence document (schema {d.get('schema')!r})")
        return cls(ApiSequence.from_json(s) for s in d["sequences"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SequencePool":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class MinerConfig:
    max_len: int = 10
    mp_sample_size: int = 32
    sem_batch_size: int = 16
    sem_sample_size: int = 32
    rng_seed: int = 0
    # Upper bound on paths enumerated per DFS start node before sampling.
    mp_enumeration_limit: int = 100_000

    def __post_init__(self) -> None:
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")
        if min(self.mp_sample_size, self.sem_batch_size, self.sem_sample_size) < 1:
            raise ValueError("sample and batch sizes must be positive")

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "MinerConfig":
        return cls(**(d or {}))


# -- usage examples -----------------------------------------------------------


def mine_usage_sequences(
    model: LibraryModel, diagnostics: list[str] | None = None
) -> list[ApiSequence]:
    """One UE sequence per usage-file function body that calls two or more
    public APIs.  Calls are linearized in evaluation order; branch arms
    contribute in textual order and loop bodies once."""
    api_names = set(model.names)
    root = Path(model.root)
    out: list[ApiSequence] = []
    seen: set[str] = set()
    for rel in model.usage_files:
        try:
            tree = cp.parse((root / rel).read_bytes())
        except OSError as exc:
            msg = f"skipping unreadable usage file {rel}: {exc}"
            log.warning(msg)
            if diagnostics is not None:
                diagnostics.append(msg)
            continue
        for item in cp.top_level(tree):
            if item.type != "function_definition":
                continue
            body = item.child_by_field_name("body")
            if body is None:
                continue
            if item.has_error:
                msg = f"skipping unparsable function at {rel}:{item.start_point[0] + 1}"
                log.warning(msg)
                if diagnostics is not None:
                    diagnostics.append(msg)
                continue
            calls = [name for name, _ in cp.calls_in_order(body) if name in api_names]
            if len(calls) < 2:
                continue
            fdecl, _ = cp.find_function_declarator(item.child_by_field_name("declarator"))
            seq = ApiSequence(
                tuple(calls),
                Dimension.UE,
                {
                    "file": rel,
                    "function": cp.declarator_name(fdecl) if fdecl is not None else "",
                    "lines": [item.start_point[0] + 1, item.end_point[0] + 1],
                },
            )
            if seq.id not in seen:
                seen.add(seq.id)
                out.append(seq)
    return out


# -- type compatibility -------------------------------------------------------


def types_compatible(ret: NormalizedType, param: NormalizedType) -> bool:
    """Return type ``ret`` can flow into parameter type ``param``.

    Only struct/class-like (non-primitive) bases qualify.  Qualifiers are
    ignored; pointer depth must match, except that a value and a one-level
    pointer of the same base are accepted.
    """
    if ret.is_primitive or param.is_primitive or ret.base != param.base:
        return False
    if ret.pointer_depth == param.pointer_depth:
        return True
    return {ret.pointer_depth, param.pointer_depth} == {0, 1}


def _norm(raw: str, types: TypeTable | None) -> NormalizedType | None:
    try:
        return normalize_type(raw, types)
    except TypeNormalizationError:
        return None


def compatible(a: ApiMetainfo, b: ApiMetainfo, types: TypeTable | None = None) -> bool:
    """True iff a parameter of ``b`` has the (non-primitive) return type of ``a``."""
    if a.needs_oracle or b.needs_oracle:
        return False
    ret = _norm(a.return_type, types)
    if ret is None:
        return False
    for p in b.params:
        pt = _norm(p.type, types)
        if pt is not None and types_compatible(ret, pt):
            return True
    return False


@dataclass(frozen=True)
class CompatibilityGraph:
    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]]

    def successors(self, node: str) -> list[str]:
        return sorted(b for a, b in self.edges if a == node)

    def predecessors(self, node: str) -> list[str]:
        return sorted(a for a, b in self.edges if b == node)

    def indegree(self, node: str, *, count_self_loops: bool = False) -> int:
        return sum(1 for a, b in self.edges if b == node and (count_self_loops or a != b))

    def adjacency(self) -> dict[str, list[str]]:
        adj: dict[str, list[str]] = {n: [] for n in self.nodes}
        for a, b in sorted(self.edges):
            adj[a].append(b)
        return adj

    def to_json(self) -> dict[str, Any]:
        return {"nodes": list(self.nodes), "edges": [list(e) for e in sorted(self.edges)]}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "CompatibilityGraph":
        return cls(tuple(d["nodes"]), frozenset((a, b) for a, b in d["edges"]))


def build_compat_graph(model: LibraryModel) -> CompatibilityGraph:
    apis = model.apis
    edges = {
        (a.name, b.name)
        for a in apis
        for b in apis
        if compatible(a, b, model.types)
    }
    return CompatibilityGraph(tuple(model.names), frozenset(edges))


def start_nodes(g: CompatibilityGraph) -> list[str]:
    """Zero-indegree nodes (self-loops ignored); every node when there are none."""
    roots = [n for n in g.nodes if g.indegree(n) == 0]
    return sorted(roots) if roots else sorted(g.nodes)


def iter_paths(
    adj: dict[str, list[str]], start: str, max_len: int, limit: int | None = None
) -> Iterator[tuple[str, ...]]:
    """Every node-distinct path beginning at ``start`` with 1..max_len nodes,
    in depth-first order with sorted successors."""
    count = 0
    path = [start]
    on_path = {start}
    stack: list[Iterator[str]] = [iter(adj.get(start, ()))]
    yield (start,)
    count += 1
    while stack:
        if limit is not None and count >= limit:
            return
        nxt = next(stack[-1], None)
        if nxt is None:
            stack.pop()
            on_path.discard(path.pop())
            continue
        if nxt in on_path or len(path) >= max_len:
            continue
        path.append(nxt)
        on_path.add(nxt)
        yield tuple(path)
        count += 1
        stack.append(iter(adj.get(nxt, ())))


def enumerate_mp_paths(g: CompatibilityGraph, max_len: int, limit: int | None = None) -> dict[str, list[tuple[str, ...]]]:
    """Full (pre-sampling) path set per DFS start node."""
    adj = g.adjacency()
    return {s: list(iter_paths(adj, s, max_len, limit)) for s in start_nodes(g)}


def _random_walks(adj: dict[str, list[str]], start: str, max_len: int, n: int, rng: random.Random) -> list[tuple[str, ...]]:
    walks = []
    for _ in range(n):
        path = [start]
        while len(path) < max_len:
            options = [x for x in adj.get(path[-1], ()) if x not in path]
            if not options:
                break
            path.append(rng.choice(options))
        walks.append(tuple(path))
    return walks


def mine_mp_sequences(g: CompatibilityGraph, cfg: MinerConfig) -> list[ApiSequence]:
    """DFS over the compatibility graph from every start node, then a seeded
    uniform down-sample to ``mp_sample_size`` paths per start node."""
    if not g.nodes:
        return []
    adj = g.adjacency()
    out: list[ApiSequence] = []
    for start in start_nodes(g):
        rng = random.Random(f"{cfg.rng_seed}/mp/{start}")
        paths = list(iter_paths(adj, start, cfg.max_len, cfg.mp_enumeration_limit))
        if len(paths) >= cfg.mp_enumeration_limit:
            log.warning(
                "path enumeration from %s truncated at %d; adding random walks", start, len(paths)
            )
            extra = _random_walks(adj, start, cfg.max_len, cfg.mp_sample_size, rng)
            paths = list(dict.fromkeys(paths + extra))
        if len(paths) > cfg.mp_sample_size:
            keep = sorted(rng.sample(range(len(paths)), cfg.mp_sample_size))
            paths = [paths[i] for i in keep]
        for p in paths:
            out.append(ApiSequence(p, Dimension.MP, {"start": start, "graph_path": list(p)}))
    return out
