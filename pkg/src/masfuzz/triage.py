"""Crash deduplication and API-misuse / library-bug classification."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import OracleError, PreconditionError, StateTransitionError
from .metainfo import LibraryModel
from .oracles import ChatOracle, ask, parse_json_reply, stub_rule
from .synthesis import FuzzDriver, _parse_source, extract_driver_sequence, library_payload, validate_source

log = logging.getLogger(__name__)

TOP_FRAMES = 3
KINDS = ("addr-violation", "uninit-read", "leak", "assertion", "timeout", "other")
CLASSES = ("unclassified", "api_misuse", "library_bug")
DRIVER_SYMBOLS = {"LLVMFuzzerTestOneInput", "masfuzz_take", "masfuzz_rest"}

_FRAME = re.compile(
    r"^\s*#(\d+)\s+0x[0-9a-fA-F]+\s+in\s+(.+?)(?:\s+(\S+?):(\d+)(?::\d+)?)?\s*$"
)
_FRAME_MODULE = re.compile(r"^\s*#(\d+)\s+0x[0-9a-fA-F]+\s+(?:in\s+(\S+)\s+)?\(([^)+]+)\+0x[0-9a-fA-F]+\)")


@dataclass(frozen=True)
class Frame:
    symbol: str
    file: str | None = None
    line: int | None = None

    def to_json(self) -> list[Any]:
        return [self.symbol, self.file, self.line]


@dataclass
class RawCrash:
    driver_id: str
    input: bytes
    report: str
    artifact: str | None = None
    at: float = 0.0


def sanitizer_kind(report: str) -> str:
    if "MemorySanitizer" in report and "use-of-uninitialized-value" in report:
        return "uninit-read"
    if "LeakSanitizer" in report or "detected memory leaks" in report:
        return "leak"
    if "libFuzzer: timeout" in report or "ALARM: working on the last Unit" in report:
        return "timeout"
    if "AddressSanitizer" in report:
        if re.search(r"AddressSanitizer: (?:ABRT|abort)", report) or "Assertion" in report:
            return "assertion"
        return "addr-violation"
    if re.search(r"Assertion .* failed|assertion failed|deadly signal.*ABRT|SIGABRT", report, re.I):
        return "assertion"
    return "other"


def parse_stack(report: str) -> list[Frame]:
    """Frames of the first stack trace in a sanitizer report."""
    frames: list[Frame] = []
    started = False
    for line in report.splitlines():
        m = _FRAME.match(line)
        if m:
            idx = int(m.group(1))
            if idx == 0 and started:
                break
            started = True
            sym = re.sub(r"\s+(?:\?\?)?:[?0]$", "", m.group(2).strip())
            sym = re.sub(r"\(.*\)$", "", sym) if "(" in sym and not sym.startswith("(") else sym
            file = m.group(3)
            if file in ("??", "") or file is None:
                file = None
            line_no = int(m.group(4)) if m.group(4) and file else None
            if sym.startswith("("):
                mm = _FRAME_MODULE.match(line)
                sym = mm.group(2) if mm and mm.group(2) else "??"
            frames.append(Frame(sym, file, line_no))
        elif mm := _FRAME_MODULE.match(line):
            if int(mm.group(1)) == 0 and started:
                break
            started = True
            frames.append(Frame(mm.group(2) or "??"))
        elif started and not line.strip():
            break
    return frames


@dataclass
class CrashRecord:
    driver_id: str
    input: bytes
    sanitizer_kind: str
    stack: tuple[Frame, ...]
    dedup_key: str
    classification: str = "unclassified"
    rationale: str = ""
    report: str = ""
    alternates: list[str] = field(default_factory=list)  # sha1 of duplicate inputs
    alternate_inputs: list[bytes] = field(default_factory=list)
    needs_review: bool = False
    repaired_driver: str | None = None
    at: float = 0.0

    def classify_as(self, classification: str, rationale: str) -> "CrashRecord":
        if self.classification != "unclassified":
            raise StateTransitionError(f"crash {self.dedup_key} already classified as {self.classification}")
        if classification not in CLASSES[1:]:
            raise ValueError(f"unknown classification {classification!r}")
        return replace(self, classification=classification, rationale=rationale, needs_review=False)

    def summary(self) -> dict[str, Any]:
        return {
            "dedup_key": self.dedup_key,
            "driver": self.driver_id,
            "kind": self.sanitizer_kind,
            "classification": self.classification,
            "rationale": self.rationale,
            "needs_review": self.needs_review,
            "stack": [f.to_json() for f in self.stack[:8]],
            "input_sha1": hashlib.sha1(self.input).hexdigest(),
            "alternates": sorted(self.alternates),
            "repaired_driver": self.repaired_driver,
        }


# -- frame attribution ------------------------------------------------------------


@dataclass
class FrameContext:
    root: str
    library_files: frozenset[str]
    api_names: frozenset[str]

    @classmethod
    def from_model(cls, model: LibraryModel) -> "FrameContext":
        return cls(str(model.root), frozenset(model.library_files) | frozenset(model.headers),
                   frozenset(model.names))

    def rel(self, file: str | None) -> str | None:
        if not file:
            return None
        p = Path(file)
        if p.is_absolute() and self.root:
            try:
                return p.resolve().relative_to(Path(self.root).resolve()).as_posix()
            except ValueError:
                return None
        return p.as_posix()

    def origin(self, f: Frame) -> str:
        if f.symbol in DRIVER_SYMBOLS or (f.file and re.search(r"(^|/)d\d{4}_[^/]*\.c$", f.file)):
            return "driver"
        rel = self.rel(f.file)
        if (rel is not None and rel in self.library_files) or f.symbol in self.api_names:
            return "library"
        return "external"


def dedup_key(kind: str, stack: Sequence[Frame], ctx: FrameContext) -> str:
    """``<kind>-<sha1 of the top in-library symbols>``; falls back to the
    top driver frames when no library frame is present."""
    lib = [f.symbol for f in stack if ctx.origin(f) == "library"][:TOP_FRAMES]
    if not lib:
        lib = ["driver:" + f.symbol for f in stack if ctx.origin(f) == "driver"][:TOP_FRAMES]
    digest = hashlib.sha1("|".join(lib).encode()).hexdigest()[:12]
    return f"{kind}-{digest}"


def to_record(raw: RawCrash, ctx: FrameContext) -> CrashRecord:
    kind = sanitizer_kind(raw.report)
    # root-relative library paths, bare names elsewhere: records carry no host paths
    stack = tuple(Frame(f.symbol, ctx.rel(f.file) or (Path(f.file).name if f.file else None), f.line)
                  for f in parse_stack(raw.report))
    return CrashRecord(
        driver_id=raw.driver_id, input=raw.input, sanitizer_kind=kind, stack=stack,
        dedup_key=dedup_key(kind, stack, ctx), report=raw.report, at=raw.at,
    )


def dedup(crashes: Iterable[RawCrash | CrashRecord], ctx: FrameContext) -> list[CrashRecord]:
    """One record per dedup key, first occurrence wins; inputs of duplicates
    are kept as alternates.  Accepts its own output (idempotent)."""
    out: dict[str, CrashRecord] = {}
    for c in crashes:
        rec = c if isinstance(c, CrashRecord) else to_record(c, ctx)
        if rec.dedup_key not in out:
            out[rec.dedup_key] = replace(rec, alternates=list(rec.alternates),
                                         alternate_inputs=list(rec.alternate_inputs))
            continue
        kept = out[rec.dedup_key]
        for data in [rec.input, *rec.alternate_inputs]:
            h = hashlib.sha1(data).hexdigest()
            if data != kept.input and h not in kept.alternates:
                kept.alternates.append(h)
                kept.alternate_inputs.append(data)
    return list(out.values())


# -- classification --------------------------------------------------------------------

_TRIAGE_SYSTEM = (
    "You triage fuzzer crashes in C libraries. Decide whether the crash is API misuse by the "
    'driver or a genuine library bug. Reply with JSON {"classification": "api_misuse"|"library_bug", '
    '"rationale": str}.'
)


def _parse_verdict(reply: str) -> dict[str, str]:
    d = parse_json_reply(reply)
    if not isinstance(d, dict) or d.get("classification") not in ("api_misuse", "library_bug"):
        raise OracleError("verdict needs classification api_misuse or library_bug")
    return {"classification": d["classification"], "rationale": str(d.get("rationale", ""))}


def classify(
    record: CrashRecord,
    driver_source: str,
    model: LibraryModel,
    oracle: ChatOracle,
    ctx: FrameContext | None = None,
    retries: int = 1,
) -> CrashRecord:
    """Ask the analysis oracle for a verdict.  Oracle failure leaves the
    record unclassified and flags it for manual review."""
    if record.classification != "unclassified":
        raise StateTransitionError(f"crash {record.dedup_key} already classified")
    ctx = ctx or FrameContext.from_model(model)
    frames = [{"symbol": f.symbol, "file": ctx.rel(f.file) or f.file, "line": f.line,
               "origin": ctx.origin(f)} for f in record.stack]
    implicated = [f["symbol"] for f in frames if f["symbol"] in model]
    docs = {a: model.api(a).doc or "" for a in dict.fromkeys(implicated)}
    payload = {"kind": record.sanitizer_kind, "frames": frames, "docs": docs,
               "report": record.report[:4000]}
    messages = [
        {"role": "system", "content": _TRIAGE_SYSTEM},
        {"role": "user", "content": (
            f"Sanitizer report:\n{record.report[:4000]}\n\nDriver:\n```c\n{driver_source}```\n\n"
            "Documentation of implicated APIs:\n" + json.dumps(docs, indent=1)
        )},
    ]
    try:
        verdict, _ = ask(oracle, "classify_crash", messages, payload, _parse_verdict, retries)
    except OracleError as exc:
        log.warning("crash %s left unclassified: %s", record.dedup_key, exc)
        return replace(record, needs_review=True, rationale=f"oracle failure: {exc}")
    return record.classify_as(verdict["classification"], verdict["rationale"])


_PRECONDITIONS = {
    "addr-violation": re.compile(
        r"(must|should|cannot|can't|may) not be (NULL|null)|non-?NULL|not NULL|"
        r"at least \w+ bytes|must (be|have) (at least|large enough)|buffer (size|length)", re.I),
    "uninit-read": re.compile(r"must be initiali[sz]ed|initiali[sz]e\w* (before|first)|call \w+ first", re.I),
    "assertion": re.compile(r"must|required|precondition", re.I),
}


@stub_rule("classify_crash")
def _stub_classify(payload: dict[str, Any]) -> str:
    frames = [f for f in payload["frames"] if f["origin"] != "external"]
    if not frames:
        return json.dumps({"classification": "library_bug", "rationale": "no attributable frame"})
    top = frames[0]
    if top["origin"] == "driver":
        return json.dumps({"classification": "api_misuse",
                           "rationale": f"faulting frame {top['symbol']} is driver code"})
    api = next((f["symbol"] for f in frames if f["symbol"] in payload["docs"]), None)
    pat = _PRECONDITIONS.get(payload["kind"])
    doc = payload["docs"].get(api, "") if api else ""
    if api and pat is not None:
        m = pat.search(doc)
        if m:
            return json.dumps({"classification": "api_misuse",
                               "rationale": f"{api} documents the precondition '{m.group(0)}'"})
    where = f"{top['symbol']}" + (f" ({top['file']}:{top['line']})" if top.get("file") else "")
    return json.dumps({"classification": "library_bug",
                       "rationale": f"fault inside library code at {where} with no documented precondition violated"})


# -- misuse repair ----------------------------------------------------------------------


def repair_misuse(
    record: CrashRecord,
    driver: FuzzDriver,
    oracle: ChatOracle,
    model: LibraryModel,
    new_id: str,
    ctx: FrameContext | None = None,
) -> FuzzDriver | None:
    """Single repair attempt for a driver whose crash was judged API misuse.
    Returns the repaired driver (state generated) or None when the oracle
    gives nothing usable.  The attempt is consumed either way."""
    if record.classification != "api_misuse":
        raise PreconditionError(f"crash {record.dedup_key} is not classified api_misuse")
    if driver.misuse_repairs >= 1:
        raise PreconditionError(f"{driver.id}: misuse repair already attempted")
    driver.misuse_repairs += 1
    ctx = ctx or FrameContext.from_model(model)
    implicated = list(dict.fromkeys(f.symbol for f in record.stack if f.symbol in model))
    messages = [
        {"role": "system", "content": (
            "You fix fuzz drivers that misuse a C library API. Reply with the full corrected file "
            "in a ```c fenced block.")},
        {"role": "user", "content": (
            f"The driver crashed and the crash was judged API misuse: {record.rationale}\n"
            f"Implicated APIs: {', '.join(implicated) or 'none'}\n\n```c\n{driver.source}```")},
    ]
    payload = {
        "source": driver.source, "sequence": list(driver.sequence), "target": driver.target_api,
        "implicated": implicated, "rationale": record.rationale, "library": library_payload(model),
        "title": f"{new_id}: {driver.target_api} (misuse repair of {driver.id})",
    }
    try:
        source, _ = ask(oracle, "repair_misuse", messages, payload, _parse_source, 1)
    except OracleError as exc:
        log.info("%s: misuse repair failed: %s", driver.id, exc)
        return None
    if validate_source(source):
        return None
    child = FuzzDriver(new_id, driver.target_api, source, dict(driver.sequences_used), lineage=driver.id)
    child.sequence = extract_driver_sequence(source, model.names)
    tags = dict(zip(driver.sequence, driver.tags))
    child.tags = tuple(tags.get(a, "SEM") for a in child.sequence)
    return child


@stub_rule("repair_misuse")
def _stub_repair_misuse(payload: dict[str, Any]) -> str:
    """Drop calls to implicated APIs other than the target and re-render."""
    from .synthesis import _fence, _renderer

    renderer, _ = _renderer(payload)
    drop = set(payload["implicated"]) - {payload["target"]}
    seq = [a for a in payload["sequence"] if a not in drop] or [payload["target"]]
    return _fence(renderer.render(seq, title=payload.get("title", "")))


# -- artifacts ------------------------------------------------------------------------


def write_artifacts(records: Iterable[CrashRecord], crashes_dir: str | Path) -> None:
    root = Path(crashes_dir)
    for r in records:
        d = root / r.dedup_key
        d.mkdir(parents=True, exist_ok=True)
        (d / "input.bin").write_bytes(r.input)
        (d / "report.txt").write_text(r.report)
        for data in r.alternate_inputs:
            (d / f"alt-{hashlib.sha1(data).hexdigest()[:16]}.bin").write_bytes(data)
        (d / "triage.json").write_text(json.dumps(r.summary(), indent=1, sort_keys=True) + "\n")


def summary_table(records: Sequence[CrashRecord]) -> dict[str, int]:
    """Unique crashes, misuse crashes, potential library bugs, unclassified."""
    return {
        "unique_crashes": len(records),
        "misuse_crashes": sum(r.classification == "api_misuse" for r in records),
        "library_bugs": sum(r.classification == "library_bug" for r in records),
        "unclassified": sum(r.classification == "unclassified" for r in records),
    }


_KIND_HEADLINE = {
    "addr-violation": "==1==ERROR: AddressSanitizer: SEGV on unknown address 0x000000000000",
    "uninit-read": "==1==WARNING: MemorySanitizer: use-of-uninitialized-value",
    "leak": "==1==ERROR: LeakSanitizer: detected memory leaks",
    "assertion": "==1==ERROR: AddressSanitizer: ABRT on unknown address 0x000000000001",
    "timeout": "==1== ERROR: libFuzzer: timeout after 25 seconds",
    "other": "==1==ERROR: libFuzzer: deadly signal",
}


def format_report(kind: str, frames: Sequence[Sequence[Any]]) -> str:
    """Sanitizer-shaped report text (used by the simulator and for
    synthetic crashes)."""
    lines = [_KIND_HEADLINE.get(kind, _KIND_HEADLINE["other"])]
    for i, fr in enumerate(frames):
        sym = fr[0]
        loc = f" {fr[1]}:{fr[2]}" if len(fr) > 2 and fr[1] else ""
        lines.append(f"    #{i} 0x{i:012x} in {sym}{loc}")
    lines.append("")
    top = frames[0][0] if frames else "??"
    lines.append(f"SUMMARY: {kind} in {top}")
    return "\n".join(lines) + "\n"
