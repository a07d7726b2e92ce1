"""Campaign pipeline: mine, generate, schedule, triage and report.

Every stage reads its predecessor's checkpoint from the working directory
and writes its own, so stages can be re-run or resumed independently.
``state.json`` records which stages finished under which configuration.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import random
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .build import ToolchainCompiler
from .config import CampaignConfig
from .coverage import CoverageLedger, SequenceHistory, normalize_weights
from .errors import DependencyError, PreconditionError
from .executor import LibFuzzerExecutor, SimSpec, SimulatedExecutor
from .metainfo import LibraryModel, scan_library
from .mutation import apply_mutation, compute_energy, plan_mutation
from .oracles import make_oracle
from .scheduler import CampaignState, ScheduleDecision, assign_time, run_campaign
from .semantics import SemanticRelation, mine_semantic_sequences
from .sequences import CompatibilityGraph, SequencePool, build_compat_graph, mine_mp_sequences, mine_usage_sequences
from .synthesis import (
    Compiler,
    DriverState,
    FuzzDriver,
    NullCompiler,
    build_seed_corpus,
    compile_with_repair,
    generate_driver,
    load_drivers,
    save_drivers,
    select_sequences,
    target_order,
)
from .triage import FrameContext, classify, dedup, repair_misuse, summary_table, write_artifacts

log = logging.getLogger(__name__)

STAGES = ("mine", "generate", "schedule", "triage", "report")
REQUIRES = {"generate": "mine", "schedule": "generate", "triage": "schedule", "report": "triage"}
# Config sections each stage depends on (cumulative along the pipeline).
_SECTIONS = {
    "mine": ("library", "miner", "oracles", "rng_seed"),
    "generate": ("compiler", "executor", "rounds"),
    "schedule": ("scheduler", "weights"),
    "triage": (),
    "report": (),
}
STATE_SCHEMA = "masfuzz.state/1"
CAMPAIGN_SCHEMA = "masfuzz.campaign/1"
SEMANTICS_SCHEMA = "masfuzz.semantics/1"
TRIAGE_SCHEMA = "masfuzz.triage/1"
REPORT_SCHEMA = "masfuzz.report/1"

EXIT_CODES = {"completed": 0, "budget_exhausted": 3}


def _dump(path: Path, doc: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)


def _load(path: Path) -> Any:
    return json.loads(path.read_text())


def driver_id(n: int) -> str:
    return f"d{n:04d}"


@dataclass
class Workspace:
    """Paths and stage bookkeeping inside the working directory."""

    cfg: CampaignConfig
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def dir(self) -> Path:
        return self.cfg.workdir

    def path(self, name: str) -> Path:
        return self.dir / name

    @property
    def build_dir(self) -> Path:
        return self.dir / "build"

    def _state(self) -> dict[str, Any]:
        p = self.path("state.json")
        return _load(p) if p.exists() else {"schema": STATE_SCHEMA, "stages": {}}

    def fingerprint(self, stage: str) -> str:
        sections: list[str] = []
        for s in STAGES[: STAGES.index(stage) + 1]:
            sections.extend(_SECTIONS[s])
        return self.cfg.fingerprint(*sections)

    def done(self, stage: str) -> bool:
        rec = self._state()["stages"].get(stage)
        return bool(rec) and rec.get("fingerprint") == self.fingerprint(stage)

    def mark(self, stage: str, **info: Any) -> None:
        st = self._state()
        # a re-run invalidates every later stage
        for later in STAGES[STAGES.index(stage) + 1:]:
            st["stages"].pop(later, None)
        st["stages"][stage] = {"fingerprint": self.fingerprint(stage), **info}
        _dump(self.path("state.json"), st)

    def require(self, stage: str, *files: str) -> None:
        prior = REQUIRES.get(stage)
        if prior is None:
            return
        if not self._state()["stages"].get(prior):
            raise DependencyError(stage, prior, "state.json entry")
        for f in files:
            if not self.path(f).exists():
                raise DependencyError(stage, prior, f)

    def record_time(self, stage: str, seconds: float) -> None:
        self.timings[stage] = round(seconds, 3)
        p = self.path("timings.json")
        doc = _load(p) if p.exists() else {}
        doc[stage] = round(seconds, 3)
        _dump(p, doc)

    def model(self) -> LibraryModel:
        return LibraryModel.load(self.path("model.json"), root=str(self.cfg.root))


def _timed(stage: str) -> Callable:
    def deco(fn: Callable) -> Callable:
        def wrapper(ws: Workspace, *a: Any, **kw: Any) -> Any:
            t0 = time.monotonic()
            try:
                return fn(ws, *a, **kw)
            finally:
                ws.record_time(stage, time.monotonic() - t0)

        wrapper.__name__ = fn.__name__
        wrapper.__doc__ = fn.__doc__
        return wrapper

    return deco


# -- mine ---------------------------------------------------------------------------------


@_timed("mine")
def mine(ws: Workspace) -> dict[str, Any]:
    """Scan the library and mine UE, MP and SEM sequences."""
    cfg = ws.cfg
    ws.dir.mkdir(parents=True, exist_ok=True)
    model = scan_library(cfg.root, cfg.scan)
    diagnostics: list[str] = []
    ue = mine_usage_sequences(model, diagnostics)
    graph = build_compat_graph(model)
    mp = mine_mp_sequences(graph, cfg.miner)
    oracle = make_oracle(cfg.oracles["semantic"])
    sem, descs, rels = mine_semantic_sequences(model, oracle, cfg.miner, cfg.max_in_flight)
    pool = SequencePool([*ue, *mp, *sem])
    model.save(ws.path("model.json"))
    pool.save(ws.path("sequences.json"))
    _dump(ws.path("graph.json"), {"schema": "masfuzz.graph/1", **graph.to_json()})
    _dump(ws.path("semantics.json"), {
        "schema": SEMANTICS_SCHEMA,
        "descriptions": [descs[k].to_json() for k in sorted(descs)],
        "relations": [r.to_json() for r in rels],
        "diagnostics": diagnostics,
    })
    stats = pool.stats()
    ws.mark("mine", apis=len(model.apis), sequences=len(pool))
    log.info("mined %d APIs, %d sequences", len(model.apis), len(pool))
    return stats


# -- generate ------------------------------------------------------------------------------


def make_compiler(ws: Workspace, model: LibraryModel) -> Compiler:
    if ws.cfg.simulated:
        return NullCompiler(model.headers)
    return ToolchainCompiler.from_config(model, str(ws.build_dir), ws.cfg.compiler)


def _write_seeds(ws: Workspace, driver: FuzzDriver, model: LibraryModel, oracle: Any) -> int:
    corpus = build_seed_corpus(driver, model, oracle)
    d = ws.path("corpus") / driver.id
    if d.exists():
        shutil.rmtree(d)
    return len(corpus.write(d))


@_timed("generate")
def generate(ws: Workspace) -> list[FuzzDriver]:
    """One driver per public API per round, compiled with repair and seeded."""
    ws.require("generate", "model.json", "sequences.json")
    cfg = ws.cfg
    model = ws.model()
    pool = SequencePool.load(ws.path("sequences.json"))
    oracle = make_oracle(cfg.oracles["generation"])
    compiler = make_compiler(ws, model)
    for stale in ("corpus", "drivers"):
        if ws.path(stale).exists():
            shutil.rmtree(ws.path(stale))
    drivers: list[FuzzDriver] = []
    for _ in range(cfg.rounds):
        for target in target_order(model, pool):
            bundle = select_sequences(target, pool, model)
            drv = generate_driver(bundle, oracle, model, driver_id(len(drivers) + 1))
            compile_with_repair(drv, compiler, oracle, model)
            if drv.state == DriverState.COMPILED:
                _write_seeds(ws, drv, model, oracle)
            drivers.append(drv)
            log.info("%s -> %s (%s)", drv.id, target, drv.state.value)
    used = sorted(s.id for s in pool if s.used)
    save_drivers(drivers, ws.dir, {"used_sequences": used})
    ws.mark("generate", drivers=len(drivers),
            compiled=sum(d.state == DriverState.COMPILED for d in drivers))
    return drivers


# -- schedule -------------------------------------------------------------------------------


def make_executor(ws: Workspace, model: LibraryModel):
    cfg = ws.cfg
    ex = cfg.executor
    if cfg.simulated:
        spec_ref = ex.get("simspec", "auto")
        if spec_ref == "auto":
            spec = SimSpec.synthesize(model, seed=cfg.rng_seed, horizon=float(ex.get("horizon", 600.0)))
        else:
            spec = SimSpec.load(spec_ref)
        spec.save(ws.path("simspec.json"))
        return SimulatedExecutor(spec)
    opts = {k: v for k, v in ex.items() if k not in ("kind", "simspec")}
    return LibFuzzerExecutor(workdir=str(ws.dir), root=str(cfg.root), build_dir=str(ws.build_dir),
                             seed=cfg.rng_seed, **opts)


def _predecessors(graph: CompatibilityGraph, rels: list[SemanticRelation]) -> dict[str, set[str]]:
    preds: dict[str, set[str]] = {n: set(graph.predecessors(n)) for n in graph.nodes}
    for r in rels:
        preds.setdefault(r.successor, set()).add(r.predecessor)
    return preds


@dataclass
class _Campaign:
    """Everything the scheduling loop mutates, in one checkpointable unit."""

    drivers: list[FuzzDriver]
    children: list[FuzzDriver]
    pool: SequencePool
    state: CampaignState
    order: list[str]
    status: str | None = None

    def all_drivers(self) -> list[FuzzDriver]:
        return self.drivers + self.children

    def next_id(self) -> str:
        return driver_id(1 + max(int(d.id[1:]) for d in self.all_drivers()))


def _save_campaign(ws: Workspace, camp: _Campaign, executor: Any) -> None:
    for d in camp.children:
        (ws.path("drivers") / d.filename).write_text(d.source)
    doc = {
        "schema": CAMPAIGN_SCHEMA,
        "fingerprint": ws.fingerprint("schedule"),
        "status": camp.status,
        "order": camp.order,
        "state": camp.state.to_json(),
        "drivers": [d.to_json() for d in camp.drivers],
        "children": [d.to_json() for d in camp.children],
        "used_sequences": sorted(s.id for s in camp.pool if s.used),
        "executor": executor.snapshot() if hasattr(executor, "snapshot") else None,
    }
    _dump(ws.path("campaign.json"), doc)
    _dump(ws.path("coverage") / "ledger.json", camp.state.ledger.to_json())


def _load_drivers_json(ws: Workspace, recs: list[dict[str, Any]]) -> list[FuzzDriver]:
    return [FuzzDriver.from_json(r, (ws.path("drivers") / r["file"]).read_text()) for r in recs]


def load_campaign(ws: Workspace) -> dict[str, Any]:
    p = ws.path("campaign.json")
    if not p.exists():
        raise DependencyError("triage", "schedule", "campaign.json")
    doc = _load(p)
    if doc.get("schema") != CAMPAIGN_SCHEMA:
        raise ValueError(f"not a campaign checkpoint (schema {doc.get('schema')!r})")
    return doc


def _fresh_campaign(ws: Workspace, model: LibraryModel) -> _Campaign:
    pool = SequencePool.load(ws.path("sequences.json"))
    index = _load(ws.path("drivers.json"))
    for sid in index.get("used_sequences", []):
        pool.claim(sid)
    drivers = load_drivers(ws.dir)
    scfg = ws.cfg.scheduler_config()
    order = [d.id for d in drivers if d.state == DriverState.COMPILED]
    state = CampaignState(
        ledger=CoverageLedger.from_model(model),
        history=SequenceHistory(),
        remaining=scfg.total_budget,
        n_drivers=max(1, len(order)),
        weights=normalize_weights(ws.cfg.weights),
    )
    return _Campaign(drivers, [], pool, state, order)


def _resume_campaign(ws: Workspace, doc: dict[str, Any], executor: Any) -> _Campaign:
    pool = SequencePool.load(ws.path("sequences.json"))
    for sid in doc["used_sequences"]:
        pool.claim(sid)
    camp = _Campaign(_load_drivers_json(ws, doc["drivers"]), _load_drivers_json(ws, doc["children"]),
                     pool, CampaignState.from_json(doc["state"]), list(doc["order"]), doc["status"])
    if doc.get("executor") and hasattr(executor, "restore"):
        executor.restore(doc["executor"])
    return camp


def dry_run(ws: Workspace) -> list[ScheduleDecision]:
    """Decisions for the generated drivers against a fresh campaign state,
    without executing anything."""
    ws.require("schedule", "drivers.json")
    model = ws.model()
    camp = _fresh_campaign(ws, model)
    scfg = ws.cfg.scheduler_config()
    by_id = {d.id: d for d in camp.drivers}
    return [assign_time(by_id[x], i, camp.state, scfg) for i, x in enumerate(camp.order)]


@_timed("schedule")
def schedule(ws: Workspace, *, on_iteration: Callable[[CampaignState], None] | None = None) -> str:
    """Run the coverage-guided schedule with mutation of stagnant drivers.
    Checkpoints after every iteration and resumes an unfinished campaign."""
    ws.require("schedule", "drivers.json")
    cfg = ws.cfg
    model = ws.model()
    scfg = cfg.scheduler_config()
    executor = make_executor(ws, model)
    prev = ws.path("campaign.json")
    camp: _Campaign | None = None
    if prev.exists():
        doc = _load(prev)
        if doc.get("status") is None and doc.get("fingerprint") == ws.fingerprint("schedule"):
            camp = _resume_campaign(ws, doc, executor)
            log.info("resuming campaign at driver index %d", camp.state.next_index)
    if camp is None:
        camp = _fresh_campaign(ws, model)

    graph = CompatibilityGraph.from_json(_load(ws.path("graph.json")))
    rels = [SemanticRelation.from_json(r) for r in _load(ws.path("semantics.json"))["relations"]]
    preds = _predecessors(graph, rels)
    oracle = make_oracle(cfg.oracles["generation"])
    compiler = make_compiler(ws, model)

    def mutate(driver: FuzzDriver, state: CampaignState):
        energies = compute_energy(state.ledger, state.executed_apis, camp.pool, model.names)
        rng = random.Random(f"{cfg.rng_seed}/mutate/{driver.id}")
        plan = plan_mutation(driver, energies, camp.pool, rng, preds)
        if plan is None:
            driver.transition(DriverState.RETIRED)
            return None, {"plan": None, "note": "no unused sequence left; driver retired"}
        child = apply_mutation(driver, plan, oracle, camp.pool, model, camp.next_id())
        camp.children.append(child)
        if child.state != DriverState.RETIRED:
            compile_with_repair(child, compiler, oracle, model)
        if child.state == DriverState.COMPILED:
            # the child starts from its parent's evolved corpus plus its own seeds
            parent_corpus = ws.path("corpus") / driver.id
            _write_seeds(ws, child, model, oracle)
            if parent_corpus.is_dir():
                for f in sorted(parent_corpus.iterdir()):
                    shutil.copy2(f, ws.path("corpus") / child.id / f.name)
        return child, {"plan": plan.to_json(), "child": child.id, "child_state": child.state.value}

    def checkpoint(state: CampaignState) -> None:
        _save_campaign(ws, camp, executor)
        if on_iteration:
            on_iteration(state)

    by_id = {d.id: d for d in camp.drivers}
    order = [by_id[i] for i in camp.order]
    status = run_campaign(order, executor, scfg, camp.state, mutate=mutate,
                          on_iteration=checkpoint, root=str(cfg.root))
    camp.status = status
    _save_campaign(ws, camp, executor)
    ws.mark("schedule", status=status)
    return status


# -- triage -----------------------------------------------------------------------------------


@_timed("triage")
def triage(ws: Workspace) -> dict[str, Any]:
    """Deduplicate and classify crashes; spawn one repair per misuse crash."""
    ws.require("triage", "campaign.json")
    doc = load_campaign(ws)
    if doc["status"] is None:
        raise DependencyError("triage", "schedule", "a finished campaign")
    cfg = ws.cfg
    model = ws.model()
    state = CampaignState.from_json(doc["state"])
    drivers = {d.id: d for d in _load_drivers_json(ws, doc["drivers"] + doc["children"])}
    ctx = FrameContext.from_model(model)
    oracle = make_oracle(cfg.oracles["analysis"])
    gen_oracle = make_oracle(cfg.oracles["generation"])
    compiler = make_compiler(ws, model)
    next_n = 1 + max((int(i[1:]) for i in drivers), default=0)
    records = []
    repaired: list[FuzzDriver] = []
    for rec in dedup(state.crashes, ctx):
        src = drivers[rec.driver_id].source if rec.driver_id in drivers else ""
        rec = classify(rec, src, model, oracle, ctx)
        parent = drivers.get(rec.driver_id)
        if rec.classification == "api_misuse" and parent is not None and parent.misuse_repairs < 1:
            fixed = repair_misuse(rec, parent, gen_oracle, model, driver_id(next_n), ctx)
            if fixed is not None:
                next_n += 1
                compile_with_repair(fixed, compiler, gen_oracle, model)
                (ws.path("drivers") / fixed.filename).write_text(fixed.source)
                repaired.append(fixed)
                rec.repaired_driver = fixed.id
        records.append(rec)
    crash_dir = ws.path("crashes")
    if crash_dir.exists():
        shutil.rmtree(crash_dir)
    crash_dir.mkdir(parents=True)
    write_artifacts(records, crash_dir)
    out = {
        "schema": TRIAGE_SCHEMA,
        "summary": summary_table(records),
        "records": [r.summary() for r in records],
        "repaired_drivers": [d.to_json() for d in repaired],
    }
    _dump(ws.path("triage.json"), out)
    ws.mark("triage", unique=len(records))
    return out


# -- report -----------------------------------------------------------------------------------


def _round(x: float) -> float:
    return round(float(x), 6)


@_timed("report")
def report(ws: Workspace) -> dict[str, Any]:
    """Assemble report.json, report.txt and coverage_curve.csv."""
    ws.require("report", "triage.json", "campaign.json")
    cfg = ws.cfg
    doc = load_campaign(ws)
    tri = _load(ws.path("triage.json"))
    model = ws.model()
    state = CampaignState.from_json(doc["state"])
    scfg = cfg.scheduler_config()
    pool = SequencePool.load(ws.path("sequences.json"))
    for sid in doc["used_sequences"]:
        pool.claim(sid)
    per_driver_new: dict[str, int] = {}
    for entry in state.entries:
        for run in entry.get("runs", []):
            per_driver_new[run["driver"]] = per_driver_new.get(run["driver"], 0) + run["new_branches"]
    total_new = sum(per_driver_new.values())
    glob = len(state.ledger.global_branches)
    rep = {
        "schema": REPORT_SCHEMA,
        "status": doc["status"],
        "library": {
            "apis": len(model.apis),
            "headers": model.headers,
            "usage_files": model.usage_files,
            "branch_totals": dict(sorted(model.branch_totals.items())),
        },
        "config": {
            "rng_seed": cfg.rng_seed,
            "rounds": cfg.rounds,
            "executor": cfg.executor.get("kind"),
            "scheduler": {k: getattr(scfg, k) for k in
                          ("theta", "beta", "base", "alpha_min", "alpha_max", "total_budget", "quantum")},
            "weights": dict(sorted(cfg.weights.items())),
        },
        "timings": "timings.json",
        "sequences": pool.stats(),
        "drivers": [d for d in doc["drivers"] + doc["children"]],
        "schedule": state.entries,
        "budget": {"total": scfg.total_budget, "consumed": _round(state.consumed),
                   "remaining": _round(state.remaining)},
        "coverage": {
            "global_branches": glob,
            "per_driver_new": dict(sorted(per_driver_new.items())),
            "consistent": total_new == glob,
            "per_api": {a: list(v) for a, v in state.ledger.per_api.items()},
            "curve": [[_round(t), n] for t, n in state.curve],
        },
        "crashes": {"summary": tri["summary"], "records": tri["records"],
                    "repaired_drivers": [d["id"] for d in tri["repaired_drivers"]]},
    }
    for d in rep["drivers"]:
        d.pop("source_sha1", None)
    _dump(ws.path("report.json"), rep)
    ws.path("report.txt").write_text(render_text(rep))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_s", "global_branches"])
    w.writerow([0, 0])
    for t, n in rep["coverage"]["curve"]:
        w.writerow([t, n])
    ws.path("coverage_curve.csv").write_text(buf.getvalue())
    ws.mark("report")
    return rep


def render_text(rep: dict[str, Any]) -> str:
    lines = [f"masfuzz campaign report ({rep['status']})", ""]
    lib = rep["library"]
    lines.append(f"library: {lib['apis']} public APIs, {len(lib['headers'])} headers, "
                 f"{len(lib['usage_files'])} usage files")
    lines.append("")
    lines.append("sequence pool:")
    for dim, s in rep["sequences"].items():
        lines.append(f"  {dim:<4} {s['count']:>5} sequences, {s['used']:>4} used, "
                     f"mean length {s['mean_length']:.2f}, max {s['max_length']}")
    lines.append("")
    b = rep["budget"]
    lines.append(f"budget: {b['consumed']:.1f}s of {b['total']:.1f}s consumed")
    lines.append(f"global branches covered: {rep['coverage']['global_branches']}")
    lines.append("")
    lines.append(f"{'driver':<7} {'target':<28} {'state':<15} {'lineage':<8} sequence")
    for d in rep["drivers"]:
        lines.append(f"{d['id']:<7} {d['target_api']:<28} {d['state']:<15} {d['lineage'] or '-':<8} "
                     + " -> ".join(d["sequence"]))
    lines.append("")
    lines.append(f"{'driver':<7} {'action':<8} {'alpha':>6} {'omega':>6} {'avgcov':>7} {'assigned':>9} {'new':>5}")
    for e in rep["schedule"]:
        dec = e.get("decision")
        if dec is None:
            lines.append(f"{e['driver']:<7} {'-':<8} {e.get('note', '')}")
            continue
        new = sum(r["new_branches"] for r in e.get("runs", []))
        lines.append(f"{e['driver']:<7} {dec['action']:<8} {dec['alpha_t']:>6.3f} {dec['omega']:>6.3f} "
                     f"{dec['avg_cov']:>7.3f} {dec['assigned_time']:>9.2f} {new:>5}")
        if e.get("child"):
            lines.append(f"  mutated -> {e['child']}")
    lines.append("")
    s = rep["crashes"]["summary"]
    lines.append(f"crashes: {s['unique_crashes']} unique, {s['misuse_crashes']} misuse, "
                 f"{s['library_bugs']} library bugs, {s['unclassified']} unclassified")
    for r in rep["crashes"]["records"]:
        top = " <- ".join(f[0] for f in r["stack"][:4])
        lines.append(f"  {r['dedup_key']}  {r['classification']:<12} {top}")
    return "\n".join(lines) + "\n"


# -- whole pipeline ---------------------------------------------------------------------------


def run(cfg: CampaignConfig, *, on_iteration: Callable[[CampaignState], None] | None = None) -> dict[str, Any]:
    """Execute every stage, skipping those already checkpointed under the
    same configuration.  Returns the campaign report."""
    ws = Workspace(cfg)
    ws.dir.mkdir(parents=True, exist_ok=True)
    if not ws.done("mine"):
        mine(ws)
    if not ws.done("generate"):
        generate(ws)
    if not ws.done("schedule"):
        schedule(ws, on_iteration=on_iteration)
    if not ws.done("triage"):
        triage(ws)
    return report(ws)


def exit_code(status: str) -> int:
    if status not in EXIT_CODES:
        raise PreconditionError(f"unknown campaign status {status!r}")
    return EXIT_CODES[status]
