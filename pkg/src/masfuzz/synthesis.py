"""Fuzz-driver synthesis: prompt bundles, generation, compile repair and
seed corpora."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

from . import _cparse as cp
from .errors import OracleError, PreconditionError, StateTransitionError
from .metainfo import VARIADIC, LibraryModel
from .oracles import ChatOracle, ask, extract_block, stub_rule
from .render import ENTRY_POINT, DriverRenderer, merge_sequences
from .sequences import ApiSequence, Dimension, SequencePool

log = logging.getLogger(__name__)

SCHEMA = "masfuzz.drivers/1"
MAX_REPAIR_ATTEMPTS = 3
DEFAULT_SEED = b"\x00\x00\x00\x00"


class DriverState(str, enum.Enum):
    GENERATED = "generated"
    COMPILED = "compiled"
    COMPILE_FAILED = "compile_failed"
    EXECUTED = "executed"
    MUTATED = "mutated"
    RETIRED = "retired"


S = DriverState
_TRANSITIONS: dict[DriverState, set[DriverState]] = {
    S.GENERATED: {S.COMPILED, S.COMPILE_FAILED, S.RETIRED},
    S.COMPILE_FAILED: {S.COMPILED, S.COMPILE_FAILED, S.RETIRED},
    S.COMPILED: {S.EXECUTED, S.RETIRED},
    S.EXECUTED: {S.EXECUTED, S.MUTATED, S.RETIRED},
    S.MUTATED: {S.RETIRED},
    S.RETIRED: set(),
}


@dataclass
class FuzzDriver:
    id: str
    target_api: str
    source: str
    sequences_used: dict[str, str] = field(default_factory=dict)
    state: DriverState = DriverState.GENERATED
    repair_attempts: int = 0
    lineage: str | None = None
    sequence: tuple[str, ...] = ()
    tags: tuple[str, ...] = ()
    mutations: int = 0
    misuse_repairs: int = 0
    max_repair_attempts: int = MAX_REPAIR_ATTEMPTS
    diagnostics: str = ""

    def __post_init__(self) -> None:
        self.state = DriverState(self.state)
        self.sequence = tuple(self.sequence)
        self.tags = tuple(self.tags)

    def transition(self, new: DriverState) -> None:
        new = DriverState(new)
        if new not in _TRANSITIONS[self.state]:
            raise StateTransitionError(f"{self.id}: {self.state.value} -> {new.value} is not allowed")
        self.state = new

    @property
    def tokens(self) -> tuple[tuple[str, str], ...]:
        return tuple(zip(self.sequence, self.tags))

    @property
    def filename(self) -> str:
        return f"{self.id}_{self.target_api}.c"

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id, "target_api": self.target_api, "state": self.state.value,
            "sequences_used": dict(sorted(self.sequences_used.items())),
            "repair_attempts": self.repair_attempts, "lineage": self.lineage,
            "sequence": list(self.sequence), "tags": list(self.tags),
            "mutations": self.mutations, "misuse_repairs": self.misuse_repairs,
            "source_sha1": hashlib.sha1(self.source.encode()).hexdigest(),
            "file": self.filename,
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any], source: str) -> "FuzzDriver":
        return cls(
            id=d["id"], target_api=d["target_api"], source=source,
            sequences_used=dict(d.get("sequences_used", {})), state=d["state"],
            repair_attempts=d.get("repair_attempts", 0), lineage=d.get("lineage"),
            sequence=tuple(d.get("sequence", ())), tags=tuple(d.get("tags", ())),
            mutations=d.get("mutations", 0), misuse_repairs=d.get("misuse_repairs", 0),
        )


def save_drivers(drivers: Iterable[FuzzDriver], workdir: str | Path, extra: Mapping[str, Any] | None = None) -> None:
    """Write sources to ``drivers/`` and the index to ``drivers.json``;
    ``extra`` adds top-level keys to the index."""
    wd = Path(workdir)
    (wd / "drivers").mkdir(parents=True, exist_ok=True)
    recs = []
    for d in drivers:
        (wd / "drivers" / d.filename).write_text(d.source)
        recs.append(d.to_json())
    doc = {**(extra or {}), "schema": SCHEMA, "drivers": recs}
    (wd / "drivers.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_drivers(workdir: str | Path) -> list[FuzzDriver]:
    wd = Path(workdir)
    doc = json.loads((wd / "drivers.json").read_text())
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"not a driver index (schema {doc.get('schema')!r})")
    return [FuzzDriver.from_json(r, (wd / "drivers" / r["file"]).read_text()) for r in doc["drivers"]]


# -- source inspection ----------------------------------------------------------


def entry_points(source: str) -> tuple[int, bool]:
    """(number of fuzzer entry-point definitions, defines main)."""
    tree = cp.parse(source.encode())
    n, has_main = 0, False
    for item in cp.top_level(tree):
        if item.type != "function_definition":
            continue
        fdecl, _ = cp.find_function_declarator(item.child_by_field_name("declarator"))
        name = cp.declarator_name(fdecl.child_by_field_name("declarator")) if fdecl is not None else ""
        n += name == ENTRY_POINT
        has_main |= name == "main"
    return n, has_main


def validate_source(source: str) -> str | None:
    """Reason for rejecting an oracle-produced driver, or None."""
    n, has_main = entry_points(source)
    if n == 0:
        return f"no {ENTRY_POINT} definition"
    if n > 1:
        return f"{n} definitions of {ENTRY_POINT}"
    if has_main:
        return "driver defines its own main()"
    return None


def extract_driver_sequence(source: str, api_names: Iterable[str]) -> tuple[str, ...]:
    """Seq(D): public-API call expressions of the driver in evaluation order."""
    names = set(api_names)
    tree = cp.parse(source.encode())
    out: list[str] = []
    for item in cp.top_level(tree):
        if item.type == "function_definition":
            body = item.child_by_field_name("body")
            if body is not None:
                out.extend(n for n, _ in cp.calls_in_order(body) if n in names)
    return tuple(out)


def tag_sequence(seq: Sequence[str], sources: Mapping[str, Sequence[str] | None]) -> tuple[str, ...]:
    """Dimension tag per call: the first prompt dimension (UE, MP, SEM)
    whose sequence names the API, else the first dimension present."""
    present = [d for d in ("UE", "MP", "SEM") if sources.get(d)]
    default = present[0] if present else "SEM"
    tags = []
    for api in seq:
        tags.append(next((d for d in present if api in sources[d]), default))
    return tuple(tags)


def is_subsequence(needle: Sequence[str], hay: Sequence[str]) -> bool:
    it = iter(hay)
    return all(any(x == y for y in it) for x in needle)


# -- prompt bundles ---------------------------------------------------------------


@dataclass
class PromptBundle:
    target_api: str
    backbone: ApiSequence | None = None
    extension: ApiSequence | None = None
    complement: ApiSequence | None = None
    api_contexts: dict[str, dict[str, Any]] = field(default_factory=dict)
    fallback: bool = False

    def __post_init__(self) -> None:
        if not (self.backbone or self.extension or self.complement):
            raise ValueError("a prompt bundle needs at least one sequence")
        missing = {a for s in self.sequences.values() for a in s.apis} - set(self.api_contexts)
        if missing:
            raise ValueError(f"no context for {sorted(missing)}")

    @property
    def sequences(self) -> dict[str, ApiSequence]:
        out = {}
        for dim, seq in (("UE", self.backbone), ("MP", self.extension), ("SEM", self.complement)):
            if seq is not None:
                out[dim] = seq
        return out


def api_context(model: LibraryModel, name: str) -> dict[str, Any]:
    a = model.api(name)
    return {"name": a.name, "signature": a.signature, "doc": a.doc, "file": a.file, "line": a.line}


def select_sequences(target: str, pool: SequencePool, model: LibraryModel) -> PromptBundle:
    """Claim the longest unused sequence containing ``target`` from each
    dimension.  With nothing available the bundle carries a singleton SEM
    sequence that is not added to the pool."""
    picked = {dim: pool.claim_best(target, dim) for dim in Dimension}
    fallback = not any(picked.values())
    if fallback:
        picked[Dimension.SEM] = ApiSequence((target,), Dimension.SEM, {"fallback": True}, used=True)
    apis = sorted({a for s in picked.values() if s for a in s.apis} | {target})
    return PromptBundle(
        target_api=target,
        backbone=picked[Dimension.UE],
        extension=picked[Dimension.MP],
        complement=picked[Dimension.SEM],
        api_contexts={a: api_context(model, a) for a in apis},
        fallback=fallback,
    )


def target_order(model: LibraryModel, pool: SequencePool) -> list[str]:
    """Public APIs by descending potential, then name."""
    return sorted(model.names, key=lambda a: (-pool.potential(a), a))


# -- generation -------------------------------------------------------------------

_GEN_SYSTEM = (
    "You write libFuzzer fuzz drivers for C libraries. Reply with one complete C file "
    "in a ```c fenced block. Define exactly one LLVMFuzzerTestOneInput(const uint8_t *data, "
    "size_t size) and no main()."
)


def library_payload(model: LibraryModel) -> dict[str, Any]:
    return {
        "headers": list(model.headers),
        "apis": [a.to_json() for a in model.apis],
        "typedefs": model.types.to_json(),
    }


def _gen_messages(bundle: PromptBundle, model: LibraryModel) -> list[dict[str, str]]:
    parts = [f"Target API: {bundle.target_api}"]
    if bundle.backbone:
        parts.append("Usage-example sequence (keep this order, it is the backbone): "
                     + " -> ".join(bundle.backbone.apis))
    if bundle.extension:
        parts.append("Type-propagation sequence (feed each return value into the next call): "
                     + " -> ".join(bundle.extension.apis))
    if bundle.complement:
        parts.append("Semantic sequence (respect these ordering constraints): "
                     + " -> ".join(bundle.complement.apis))
    ctx = "\n\n".join(
        f"{c['signature']}\n/* {c['doc'] or 'no documentation'} */" for c in bundle.api_contexts.values()
    )
    headers = ", ".join(Path(h).name for h in model.headers)
    parts.append(f"Public headers: {headers}\nAPI reference:\n{ctx}")
    parts.append("Split the input bytes across primitive parameters and release every resource you create.")
    return [{"role": "system", "content": _GEN_SYSTEM}, {"role": "user", "content": "\n\n".join(parts)}]


def _parse_source(reply: str) -> str:
    src = extract_block(reply).strip()
    if not src:
        raise OracleError("empty driver source")
    return src + "\n"


def _finish(driver: FuzzDriver, model: LibraryModel, sources: Mapping[str, Sequence[str] | None]) -> FuzzDriver:
    driver.sequence = extract_driver_sequence(driver.source, model.names)
    driver.tags = tag_sequence(driver.sequence, sources)
    return driver


def generate_driver(
    bundle: PromptBundle,
    oracle: ChatOracle,
    model: LibraryModel,
    driver_id: str,
    retries: int = 1,
) -> FuzzDriver:
    """Ask the generation oracle for a driver realizing ``bundle``.  A reply
    without a single entry point (or with its own main) is rejected and
    regenerated once; a second rejection yields a ``compile_failed`` driver."""
    messages = _gen_messages(bundle, model)
    payload = {
        "target": bundle.target_api,
        "sequences": {d: list(s.apis) for d, s in bundle.sequences.items()},
        "library": library_payload(model),
        "title": f"{driver_id}: {bundle.target_api}",
    }
    sources = {d: s.apis for d, s in bundle.sequences.items()}
    used = {d: s.id for d, s in bundle.sequences.items() if not s.provenance.get("fallback")}
    source, reason = "", ""
    for task in ("generate_driver", "regenerate_driver"):
        try:
            source, _ = ask(oracle, task, messages, payload, _parse_source, retries)
        except OracleError as exc:
            reason = str(exc)
            continue
        reason = validate_source(source) or ""
        if not reason:
            break
        log.info("%s: rejected generated driver: %s", driver_id, reason)
        messages = messages + [
            {"role": "assistant", "content": source},
            {"role": "user", "content": f"Rejected: {reason}. Produce the full corrected file."},
        ]
    driver = FuzzDriver(driver_id, bundle.target_api, source, used)
    if reason:
        driver.diagnostics = reason
        driver.transition(DriverState.COMPILE_FAILED)
    return _finish(driver, model, sources)


def regenerate_for_sequence(
    parent: FuzzDriver,
    sequence: Sequence[str],
    oracle: ChatOracle,
    model: LibraryModel,
    driver_id: str,
    note: str,
    retries: int = 1,
) -> FuzzDriver | None:
    """Source for a driver calling ``sequence`` in order (mutation children)."""
    messages = [
        {"role": "system", "content": _GEN_SYSTEM},
        {"role": "user", "content": (
            f"Rewrite this driver so that it calls exactly this API sequence, in order: "
            f"{' -> '.join(sequence)}. {note}\n\n```c\n{parent.source}```"
        )},
    ]
    payload = {
        "target": parent.target_api,
        "exact_sequence": list(sequence),
        "parent_source": parent.source,
        "library": library_payload(model),
        "title": f"{driver_id}: {parent.target_api} (from {parent.id})",
    }
    try:
        source, _ = ask(oracle, "regenerate_driver", messages, payload, _parse_source, retries)
    except OracleError as exc:
        log.info("%s: regeneration failed: %s", driver_id, exc)
        return None
    if validate_source(source):
        return None
    return FuzzDriver(driver_id, parent.target_api, source, dict(parent.sequences_used), lineage=parent.id)


# -- compilation and repair ------------------------------------------------------------


@dataclass
class CompileResult:
    ok: bool
    diagnostics: str = ""
    binary: str | None = None
    coverage_binary: str | None = None


class Compiler(Protocol):
    def compile(self, driver: FuzzDriver) -> CompileResult: ...


@dataclass
class NullCompiler:
    """Static stand-in used with the simulator: checks the entry point, the
    parse tree, and that a public header is included when library APIs are
    called."""

    headers: Sequence[str] = ()

    def compile(self, driver: FuzzDriver) -> CompileResult:
        reason = validate_source(driver.source)
        if reason:
            return CompileResult(False, f"error: {reason}")
        if cp.parse(driver.source.encode()).has_error:
            return CompileResult(False, "error: syntax error in driver source")
        names = {Path(h).name for h in self.headers}
        included = set(re.findall(r'#\s*include\s*[<"]([^>"]+)[>"]', driver.source))
        if driver.sequence and names and not ({Path(i).name for i in included} & names):
            first = driver.sequence[0]
            return CompileResult(False, f"error: implicit declaration of function '{first}'")
        return CompileResult(True)


_REPAIR_SYSTEM = (
    "You repair C fuzz drivers that fail to build. Reply with the full corrected file in a "
    "```c fenced block."
)


def repair_driver(
    driver: FuzzDriver, diagnostics: str, oracle: ChatOracle, model: LibraryModel, retries: int = 0
) -> FuzzDriver:
    """One repair attempt.  The attempt is consumed even when the oracle fails."""
    if driver.state != DriverState.COMPILE_FAILED:
        raise PreconditionError(f"{driver.id}: repair needs state compile_failed, not {driver.state.value}")
    if driver.repair_attempts >= driver.max_repair_attempts:
        raise PreconditionError(f"{driver.id}: repair attempts exhausted ({driver.repair_attempts})")
    driver.repair_attempts += 1
    messages = [
        {"role": "system", "content": _REPAIR_SYSTEM},
        {"role": "user", "content": f"Build output:\n{diagnostics}\n\nDriver:\n```c\n{driver.source}```"},
    ]
    payload = {"source": driver.source, "diagnostics": diagnostics, "library": library_payload(model)}
    try:
        source, _ = ask(oracle, "repair_driver", messages, payload, _parse_source, retries)
        driver.source = source
    except OracleError as exc:
        log.info("%s: repair attempt %d failed: %s", driver.id, driver.repair_attempts, exc)
    driver.sequence = extract_driver_sequence(driver.source, model.names)
    if len(driver.tags) != len(driver.sequence):
        driver.tags = tuple(driver.tags[:len(driver.sequence)]) + ("SEM",) * max(0, len(driver.sequence) - len(driver.tags))
    return driver


def compile_with_repair(
    driver: FuzzDriver, compiler: Compiler, oracle: ChatOracle, model: LibraryModel
) -> CompileResult:
    """Compile, repairing up to the attempt cap; retires the driver when the
    cap is reached."""
    if driver.state not in (DriverState.GENERATED, DriverState.COMPILE_FAILED):
        raise PreconditionError(f"{driver.id}: cannot compile in state {driver.state.value}")
    result = compiler.compile(driver) if driver.state == DriverState.GENERATED else CompileResult(False, driver.diagnostics)
    while not result.ok:
        driver.diagnostics = result.diagnostics
        if driver.state != DriverState.COMPILE_FAILED:
            driver.transition(DriverState.COMPILE_FAILED)
        if driver.repair_attempts >= driver.max_repair_attempts:
            driver.transition(DriverState.RETIRED)
            return result
        repair_driver(driver, result.diagnostics, oracle, model)
        result = compiler.compile(driver)
    driver.diagnostics = ""
    driver.transition(DriverState.COMPILED)
    return result


# -- seed corpus ----------------------------------------------------------------------


@dataclass(frozen=True)
class Seed:
    data: bytes
    origin: str

    @property
    def sha1(self) -> str:
        return hashlib.sha1(self.data).hexdigest()


@dataclass
class SeedCorpus:
    target_driver: str
    seeds: list[Seed] = field(default_factory=list)

    def __post_init__(self) -> None:
        if any(not s.data for s in self.seeds):
            raise ValueError("seeds must be non-empty")

    def write(self, directory: str | Path) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for s in self.seeds:
            p = d / f"seed-{s.sha1[:16]}"
            p.write_bytes(s.data)
            paths.append(p)
        return paths


_QUOTED = re.compile(r'"((?:[^"\\\n]|\\.){2,})"')
_CODE_BLOCK = re.compile(r"(?:@code|\\code|```|<pre>)\s*\n?(.*?)(?:@endcode|\\endcode|```|</pre>)", re.S)


def doc_samples(doc: str) -> list[str]:
    """Literal input samples embedded in a doc comment: code blocks and
    double-quoted strings."""
    out = [m.group(1).strip("\n") for m in _CODE_BLOCK.finditer(doc)]
    stripped = _CODE_BLOCK.sub(" ", doc)
    for m in _QUOTED.finditer(stripped):
        try:
            out.append(m.group(1).encode().decode("unicode_escape"))
        except UnicodeDecodeError:
            out.append(m.group(1))
    return [s for s in out if s]


def build_seed_corpus(
    driver: FuzzDriver, model: LibraryModel, oracle: ChatOracle | None = None
) -> SeedCorpus:
    """Samples from the documentation of the driver's APIs, optional oracle
    proposals, and a 4-byte default seed; deduplicated by content."""
    if driver.state not in (DriverState.COMPILED, DriverState.EXECUTED):
        raise PreconditionError(f"{driver.id}: seed corpus needs a compiled driver")
    seeds: list[Seed] = []
    seen: set[str] = set()

    def add(data: bytes, origin: str) -> None:
        h = hashlib.sha256(data).hexdigest()
        if data and h not in seen:
            seen.add(h)
            seeds.append(Seed(data, origin))

    for api in dict.fromkeys(driver.sequence or (driver.target_api,)):
        if api in model and model.api(api).doc:
            for sample in doc_samples(model.api(api).doc):
                add(sample.encode("utf-8", errors="surrogateescape"), f"doc:{api}")
    if oracle is not None:
        payload = {"apis": [api_context(model, a) for a in dict.fromkeys(driver.sequence) if a in model]}
        messages = [{"role": "user", "content": (
            "Propose up to 8 short example inputs for these APIs as a JSON list of strings:\n"
            + json.dumps(payload["apis"], indent=1))}]
        try:
            proposals, _ = ask(oracle, "propose_seeds", messages, payload, _parse_seed_list, 0)
            for p in proposals:
                add(p.encode(), "oracle")
        except OracleError as exc:
            log.info("%s: no oracle seeds: %s", driver.id, exc)
    add(DEFAULT_SEED, "default")
    return SeedCorpus(driver.id, seeds)


def _parse_seed_list(reply: str) -> list[str]:
    from .oracles import parse_json_reply

    val = parse_json_reply(reply)
    if not isinstance(val, list) or not all(isinstance(x, str) for x in val):
        raise OracleError("seed proposals must be a JSON list of strings")
    return val


# -- stub rules ---------------------------------------------------------------------------


def _renderer(payload: dict[str, Any]) -> tuple[DriverRenderer, LibraryModel]:
    from .metainfo import ApiMetainfo, TypeTable

    lib = payload["library"]
    apis = [ApiMetainfo.from_json(a) for a in lib["apis"]]
    types = TypeTable.from_json(lib["typedefs"])
    model = LibraryModel(apis, lib["headers"], [], {}, types)
    return DriverRenderer(apis, types, lib["headers"]), model


def _type_flow(model: LibraryModel) -> tuple[dict[str, set[str]], dict[str, set[str]]]:
    consumes: dict[str, set[str]] = {}
    produces: dict[str, set[str]] = {}
    for a in model.apis:
        consumes[a.name] = set()
        for p in a.params:
            if p.type == VARIADIC:
                continue
            try:
                nt = model.normalize(p.type)
            except Exception:
                continue
            if not nt.is_primitive:
                consumes[a.name].add(nt.base)
        try:
            rt = model.normalize(a.return_type)
            produces[a.name] = set() if rt.is_primitive else {rt.base}
        except Exception:
            produces[a.name] = set()
    return consumes, produces


def _fence(source: str) -> str:
    return f"```c\n{source}```\n"


@stub_rule("generate_driver")
def _stub_generate(payload: dict[str, Any]) -> str:
    renderer, model = _renderer(payload)
    seqs = payload["sequences"]
    consumes, produces = _type_flow(model)
    order = merge_sequences(seqs.get("UE"), [seqs.get("MP"), seqs.get("SEM")], consumes, produces)
    if payload["target"] not in order:
        order.append(payload["target"])
    return _fence(renderer.render(order, title=payload.get("title", "")))


@stub_rule("regenerate_driver")
def _stub_regenerate(payload: dict[str, Any]) -> str:
    if "exact_sequence" in payload:
        renderer, _ = _renderer(payload)
        return _fence(renderer.render(payload["exact_sequence"], title=payload.get("title", "")))
    return _stub_generate(payload)


@stub_rule("repair_driver")
def _stub_repair(payload: dict[str, Any]) -> str:
    """Add any missing public-header include; otherwise return the source
    unchanged (the build will fail again and consume an attempt)."""
    source: str = payload["source"]
    headers = [Path(h).name for h in payload["library"]["headers"]]
    included = {Path(i).name for i in re.findall(r'#\s*include\s*[<"]([^>"]+)[>"]', source)}
    missing = [h for h in headers if h not in included]
    if missing:
        lines = source.splitlines()
        last_inc = max((i for i, ln in enumerate(lines) if ln.lstrip().startswith("#include")), default=-1)
        for h in reversed(missing):
            lines.insert(last_inc + 1, f'#include "{h}"')
        source = "\n".join(lines) + "\n"
    return _fence(source)


@stub_rule("propose_seeds")
def _stub_seeds(payload: dict[str, Any]) -> str:
    return "[]"
