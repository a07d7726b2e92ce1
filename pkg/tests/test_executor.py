from __future__ import annotations

import pytest

from masfuzz.coverage import CoverageLedger, ingest_coverage
from masfuzz.errors import ExecutorError, PreconditionError
from masfuzz.executor import ExecutionResult, SimCrash, SimSpec, SimulatedExecutor, execute_simulated
from masfuzz.synthesis import DriverState, FuzzDriver, NullCompiler
from masfuzz.triage import FrameContext, dedup, parse_stack

from conftest import have_toolchain


def _driver(did="d0001", seq=("A", "B")):
    return FuzzDriver(did, seq[0], "", state=DriverState.COMPILED, sequence=seq, tags=("MP",) * len(seq))


FIVE = [(float(t), f"lib.c:{10 + t}:0") for t in range(1, 6)]


def _ledger():
    return CoverageLedger({"A": 10, "B": 10}, spans={"lib.c": [(1, 50, "A"), (51, 99, "B")]})


def test_second_call_reveals_nothing_new():
    ex = SimulatedExecutor(SimSpec({"A": FIVE}))
    led = _ledger()
    r1 = ex.execute(_driver(), 10)
    new1, _ = ingest_coverage(r1.coverage_report, led)
    r2 = ex.execute(_driver(), 10)
    new2, _ = ingest_coverage(r2.coverage_report, led)
    assert len(new1) == 5 and new2 == frozenset()
    assert r1.t_actual == r2.t_actual == 10
    assert ex.clock["d0001"] == 20


def test_reveals_follow_cumulative_time():
    ex = SimulatedExecutor(SimSpec({"A": FIVE}))
    assert len(ex.execute(_driver(), 2.5).coverage_report["branches"]) == 2
    assert len(ex.execute(_driver(), 2.5).coverage_report["branches"]) == 5


def test_crash_lands_in_second_call_only():
    spec = SimSpec({"A": FIVE}, [SimCrash("A", 15.0, frames=(("render_ref", "src/x.c", 3),))])
    ex = SimulatedExecutor(spec)
    r1 = ex.execute(_driver(), 10)
    r2 = ex.execute(_driver(), 10)
    assert r1.crashes == [] and r1.exit_reason == "budget"
    assert len(r2.crashes) == 1 and r2.exit_reason == "crash"
    assert r2.t_actual == pytest.approx(5.0)
    frames = parse_stack(r2.crashes[0].report)
    assert frames[0].symbol == "render_ref"
    assert frames[-1].symbol == "LLVMFuzzerTestOneInput"
    assert ex.execute(_driver(), 10).crashes == []


def test_simulator_is_deterministic():
    spec = SimSpec({"A": FIVE}, [SimCrash("A", 7.0)])
    runs = []
    for _ in range(2):
        ex = SimulatedExecutor(spec)
        runs.append([ex.execute(_driver(), b) for b in (3, 5, 9)])
    assert runs[0] == runs[1]


def test_budget_must_be_positive():
    with pytest.raises(PreconditionError):
        execute_simulated(_driver(), SimSpec({"A": FIVE}), 0)


def test_unknown_driver_is_an_error():
    with pytest.raises(ExecutorError):
        execute_simulated(_driver(seq=("Z",)), SimSpec({"A": FIVE}), 1)


def test_curve_by_driver_id_wins_over_api():
    spec = SimSpec({"A": FIVE, "d0001": [(1.0, "lib.c:60:0")]})
    assert spec.curve_for(_driver()) == [(1.0, "lib.c:60:0")]


def test_snapshot_restore_and_spec_round_trip(tmp_path, plist):
    spec = SimSpec.synthesize(plist, seed=3, crashes=[SimCrash("mp_to_text", 4.0)])
    p = tmp_path / "s.json"
    spec.save(p)
    assert SimSpec.load(p).to_json() == spec.to_json()
    ex = SimulatedExecutor(spec)
    d = _driver(seq=("mp_from_bytes", "mp_free"))
    ex.execute(d, 30)
    snap = ex.snapshot()
    again = SimulatedExecutor(spec)
    again.restore(snap)
    assert again.execute(d, 30) == ex.execute(d, 30)
    assert SimSpec.synthesize(plist, seed=3).curves == spec.curves


def test_result_invariant():
    with pytest.raises(ValueError):
        ExecutionResult("d", 1.0, None, [], 5)
    with pytest.raises(ValueError):
        ExecutionResult("d", 1.0, {"x": 1}, [], 0)


# -- real toolchain ------------------------------------------------------------------

toolchain = pytest.mark.skipif(not have_toolchain(), reason="clang/gcc/gcov not available")


def _build(tmp_path, model, seq, did):
    from masfuzz.build import ToolchainCompiler
    from masfuzz.executor import LibFuzzerExecutor
    from masfuzz.render import DriverRenderer

    src = DriverRenderer(model.apis, model.types, model.headers).render(seq, title=did)
    d = FuzzDriver(did, seq[0], src, sequence=tuple(seq), tags=("MP",) * len(seq))
    assert NullCompiler(model.headers).compile(d).ok
    comp = ToolchainCompiler(model, str(tmp_path / "build"))
    res = comp.compile(d)
    assert res.ok, res.diagnostics
    d.transition(DriverState.COMPILED)
    ex = LibFuzzerExecutor(str(tmp_path / "work"), model.root, str(tmp_path / "build"))
    return d, ex


@pytest.mark.toolchain
@toolchain
def test_real_run_respects_budget(tmp_path, models):
    m = models["minimath"]
    d, ex = _build(tmp_path, m, ["add", "mul"], "d0001")
    res = ex.execute(d, 3)
    assert 3.0 <= res.t_actual <= 3.0 + ex.grace
    assert res.executions > 0 and res.coverage_report is not None
    assert res.crashes == []


@pytest.mark.toolchain
@toolchain
def test_planted_crash_is_found_from_doc_seed(tmp_path, plist):
    d, ex = _build(tmp_path, plist, ["mp_from_bytes", "mp_copy", "mp_to_text", "mp_free"], "d0001")
    corpus = tmp_path / "work" / "corpus" / d.id
    corpus.mkdir(parents=True)
    (corpus / "seed-ref").write_bytes(b"MPL1Rworld")
    res = ex.execute(d, 60)
    assert res.exit_reason == "crash"
    assert res.t_actual < 60
    assert len(res.crashes) == 1 and res.crashes[0].input
    recs = dedup(res.crashes, FrameContext.from_model(plist))
    syms = [f.symbol for f in recs[0].stack]
    assert "render_ref" in syms and "mp_to_text" in syms
    assert res.coverage_report is not None and len(res.coverage_report.branches) > 0
