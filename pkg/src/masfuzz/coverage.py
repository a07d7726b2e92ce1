"""Branch-coverage accounting and the sequence-novelty metric.

Branch identifiers are ``<file>:<line>:<index>`` with ``file`` relative to
the library root; ``index`` numbers the branch outcomes recorded on that line.
"""

from __future__ import annotations

import bisect
import gzip
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import CoverageFormatError, UnknownApiError
from .metainfo import LibraryModel

log = logging.getLogger(__name__)

SIM_FORMAT = "masfuzz.sim-coverage/1"
LLVM_EXPORT_TYPE = "llvm.coverage.json.export"

Token = tuple[str, str]  # (api name, dimension tag)


# -- coverage reports -----------------------------------------------------------


@dataclass(frozen=True)
class CoverageReport:
    branches: frozenset[str]
    source: str = "unknown"


def _relativize(path: str, root: str | None) -> str:
    if root:
        try:
            return Path(path).resolve().relative_to(Path(root).resolve()).as_posix()
        except ValueError:
            pass
    return path


def parse_llvm_export(doc: Mapping[str, Any], root: str | None = None) -> CoverageReport:
    """Covered branch outcomes from an ``llvm-cov export`` JSON document.

    Each branch region contributes two outcomes (true/false), numbered in the
    order regions start on a line.
    """
    try:
        if not str(doc.get("type", "")).startswith(LLVM_EXPORT_TYPE):
            raise CoverageFormatError("not an llvm-cov export document", json.dumps(doc)[:200])
        out: set[str] = set()
        for unit in doc["data"]:
            for f in unit.get("files", []):
                name = _relativize(f["filename"], root)
                per_line: dict[int, int] = {}
                for br in f.get("branches", []):
                    line, true_count, false_count = int(br[0]), int(br[4]), int(br[5])
                    k = per_line.get(line, 0)
                    per_line[line] = k + 1
                    if true_count > 0:
                        out.add(f"{name}:{line}:{2 * k}")
                    if false_count > 0:
                        out.add(f"{name}:{line}:{2 * k + 1}")
    except CoverageFormatError:
        raise
    except (KeyError, TypeError, ValueError, IndexError, AttributeError) as exc:
        raise CoverageFormatError(f"malformed llvm-cov export: {exc}", json.dumps(doc, default=str)[:200]) from exc
    return CoverageReport(frozenset(out), "llvm-export")


def parse_gcov_json(docs: Mapping[str, Any] | Iterable[Mapping[str, Any]], root: str | None = None) -> CoverageReport:
    """Covered branch outcomes from one or more ``gcov --json-format`` documents."""
    if isinstance(docs, Mapping):
        docs = [docs]
    out: set[str] = set()
    try:
        for doc in docs:
            if "files" not in doc or "gcc_version" not in doc:
                raise CoverageFormatError("not a gcov JSON document", json.dumps(doc, default=str)[:200])
            for f in doc["files"]:
                name = _relativize(f["file"], root)
                for ln in f.get("lines", []):
                    for i, br in enumerate(ln.get("branches", [])):
                        if int(br["count"]) > 0:
                            out.add(f"{name}:{int(ln['line_number'])}:{i}")
    except CoverageFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CoverageFormatError(f"malformed gcov JSON: {exc}") from exc
    return CoverageReport(frozenset(out), "gcov")


def parse_sim_report(doc: Mapping[str, Any]) -> CoverageReport:
    try:
        if doc.get("format") != SIM_FORMAT:
            raise CoverageFormatError("not a simulator coverage document", json.dumps(doc, default=str)[:200])
        branches = doc["branches"]
        if not all(isinstance(b, str) and b.count(":") >= 2 for b in branches):
            raise CoverageFormatError("branch ids must look like file:line:index", json.dumps(branches)[:200])
        return CoverageReport(frozenset(branches), "sim")
    except (KeyError, TypeError, AttributeError) as exc:
        raise CoverageFormatError(f"malformed simulator report: {exc}", str(doc)[:200]) from exc


def load_report(report: Any, root: str | None = None) -> CoverageReport:
    """Accept a :class:`CoverageReport`, a parsed JSON document of any
    supported format, or a path to one (optionally gzipped)."""
    if isinstance(report, CoverageReport):
        return report
    if isinstance(report, (str, Path)):
        p = Path(report)
        raw = p.read_bytes()
        if p.suffix == ".gz":
            raw = gzip.decompress(raw)
        try:
            report = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CoverageFormatError(f"coverage file {p} is not JSON", raw[:200].decode(errors="replace")) from exc
    if isinstance(report, list):
        return parse_gcov_json(report, root)
    if not isinstance(report, Mapping):
        raise CoverageFormatError(f"unsupported coverage report object: {type(report).__name__}", repr(report)[:200])
    if report.get("format") == SIM_FORMAT:
        return parse_sim_report(report)
    if "gcc_version" in report:
        return parse_gcov_json(report, root)
    if "data" in report or "type" in report:
        return parse_llvm_export(report, root)
    raise CoverageFormatError("unrecognized coverage report", json.dumps(report, default=str)[:200])


# -- ledger ---------------------------------------------------------------------


@dataclass
class CoverageLedger:
    totals: dict[str, int]
    covered_sets: dict[str, set[str]] = field(default_factory=dict)
    global_branches: set[str] = field(default_factory=set)
    history: list[dict[str, Any]] = field(default_factory=list)
    spans: dict[str, list[tuple[int, int, str]]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for api in self.totals:
            self.covered_sets.setdefault(api, set())
        self._starts = {f: [s[0] for s in spans] for f, spans in self.spans.items()}

    @classmethod
    def from_model(cls, model: LibraryModel) -> "CoverageLedger":
        """initCov: zero coverage, static totals, API body spans for attribution."""
        spans: dict[str, list[tuple[int, int, str]]] = {}
        for a in model.apis:
            if a.body is not None:
                spans.setdefault(a.file, []).append((a.line, a.end_line or a.line, a.name))
        for f in spans:
            spans[f].sort()
        return cls(totals=dict(model.branch_totals), spans=spans)

    def _check(self, api: str) -> None:
        if api not in self.totals:
            raise UnknownApiError(api)

    def covered(self, api: str) -> int:
        self._check(api)
        return min(len(self.covered_sets[api]), self.totals[api])

    def total(self, api: str) -> int:
        self._check(api)
        return self.totals[api]

    def cov(self, api: str) -> float:
        t = self.total(api)
        return self.covered(api) / t if t else 0.0

    @property
    def per_api(self) -> dict[str, tuple[int, int]]:
        return {a: (self.covered(a), self.totals[a]) for a in sorted(self.totals)}

    def attribute(self, branch: str) -> str | None:
        """API whose body span contains the branch, if any."""
        try:
            file, line_s, _ = branch.rsplit(":", 2)
            line = int(line_s)
        except ValueError:
            return None
        starts = self._starts.get(file)
        if not starts:
            return None
        i = bisect.bisect_right(starts, line) - 1
        if i < 0:
            return None
        start, end, api = self.spans[file][i]
        return api if start <= line <= end else None

    def snapshot(self) -> dict[str, tuple[int, int]]:
        return self.per_api

    def to_json(self) -> dict[str, Any]:
        return {
            "totals": dict(sorted(self.totals.items())),
            "covered": {a: sorted(s) for a, s in sorted(self.covered_sets.items())},
            "global_branches": sorted(self.global_branches),
            "history": self.history,
            "spans": {f: [list(s) for s in v] for f, v in sorted(self.spans.items())},
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "CoverageLedger":
        return cls(
            totals=dict(d["totals"]),
            covered_sets={a: set(v) for a, v in d["covered"].items()},
            global_branches=set(d["global_branches"]),
            history=list(d["history"]),
            spans={f: [tuple(s) for s in v] for f, v in d["spans"].items()},
        )


def ingest_coverage(
    report: Any,
    ledger: CoverageLedger,
    *,
    driver_id: str | None = None,
    at: float = 0.0,
    root: str | None = None,
) -> tuple[frozenset[str], CoverageLedger]:
    """Merge a run's coverage into ``ledger`` (in place) and return the
    branches not seen before.  A malformed report raises
    :class:`CoverageFormatError` and leaves the ledger untouched."""
    rep = load_report(report, root)
    new = frozenset(rep.branches - ledger.global_branches)
    for b in rep.branches:
        api = ledger.attribute(b)
        if api is not None:
            ledger.covered_sets[api].add(b)
    ledger.global_branches |= new
    ledger.history.append({"driver": driver_id, "new_branches": len(new), "time": round(at, 9)})
    return new, ledger


def avg_cov(driver_apis: Iterable[str], ledger: CoverageLedger) -> float:
    """Sum of covered over sum of total across the driver's unique APIs;
    0 when the APIs have no branches at all."""
    apis = list(dict.fromkeys(driver_apis))
    covered = sum(ledger.covered(a) for a in apis)
    total = sum(ledger.total(a) for a in apis)
    return covered / total if total else 0.0


# -- sequence novelty -------------------------------------------------------------


def normalize_weights(weights: Mapping[str, float]) -> dict[str, float]:
    """Scale dimension weights to mean 1."""
    if not weights:
        return {}
    mean = sum(weights.values()) / len(weights)
    if mean <= 0:
        raise ValueError("dimension weights must have a positive mean")
    return {k: v / mean for k, v in weights.items()}


def weighted_levenshtein(
    a: Sequence[Token], b: Sequence[Token], weights: Mapping[str, float] | None = None
) -> float:
    """Edit distance over API tokens.  Inserting or deleting a token costs
    the weight of its dimension; substituting costs the larger weight of the
    two tokens; matching API names cost nothing."""
    w = weights or {}

    def cost(tok: Token) -> float:
        return w.get(tok[1], 1.0)

    prev = [0.0]
    for tok in b:
        prev.append(prev[-1] + cost(tok))
    for ta in a:
        ca = cost(ta)
        cur = [prev[0] + ca]
        for j, tb in enumerate(b, 1):
            sub = 0.0 if ta[0] == tb[0] else max(ca, cost(tb))
            cur.append(min(prev[j] + ca, cur[j - 1] + cost(tb), prev[j - 1] + sub))
        prev = cur
    return prev[-1]


@dataclass
class SequenceHistory:
    """Effective sequences of executed drivers, in execution order."""

    executed: list[tuple[str, tuple[Token, ...]]] = field(default_factory=list)

    def add(self, driver_id: str, tokens: Sequence[Token]) -> None:
        if any(d == driver_id for d, _ in self.executed):
            raise ValueError(f"sequence of driver {driver_id} already recorded")
        self.executed.append((driver_id, tuple(tuple(t) for t in tokens)))

    def __len__(self) -> int:
        return len(self.executed)

    def __contains__(self, driver_id: object) -> bool:
        return any(d == driver_id for d, _ in self.executed)

    def to_json(self) -> list[Any]:
        return [[d, [list(t) for t in toks]] for d, toks in self.executed]

    @classmethod
    def from_json(cls, d: list[Any]) -> "SequenceHistory":
        return cls([(drv, tuple(tuple(t) for t in toks)) for drv, toks in d])


def novelty(
    seq: Sequence[Token], history: SequenceHistory, weights: Mapping[str, float] | None = None
) -> float:
    """Minimum weighted edit distance to any executed sequence, divided by
    the sequence length; 1 when nothing has been executed yet."""
    if not seq:
        raise ValueError("novelty needs a non-empty sequence")
    if not history.executed:
        return 1.0
    w = normalize_weights(weights) if weights else None
    best = min(weighted_levenshtein(seq, past, w) for _, past in history.executed)
    return best / len(seq)


def tag(apis: Iterable[str], dimension: str = "UE") -> tuple[Token, ...]:
    return tuple((a, dimension) for a in apis)
