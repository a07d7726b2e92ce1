"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances are pinned as module constants so they are visible in one place.
"""

from __future__ import annotations

import functools
import itertools
import json
import random
import subprocess
import sys
import time

import pytest
import yaml

from masfuzz import pipeline
from masfuzz.config import CampaignConfig
from masfuzz.coverage import SIM_FORMAT, CoverageLedger, SequenceHistory, avg_cov, ingest_coverage, weighted_levenshtein
from masfuzz.errors import PreconditionError, StateTransitionError
from masfuzz.executor import ExecutionResult, SimSpec, SimulatedExecutor
from masfuzz.metainfo import scan_library
from masfuzz.mutation import MutationPlan, Strategy, combine, energy_of, insert, replace
from masfuzz.oracles import StubOracle
from masfuzz.scheduler import CampaignState, SchedulerConfig, assign_time, run_campaign
from masfuzz.sequences import (CompatibilityGraph, build_compat_graph, enumerate_mp_paths,
                               mine_usage_sequences, start_nodes)
from masfuzz.synthesis import CompileResult, DriverState, FuzzDriver, compile_with_repair

from conftest import FIXTURES, LIBS, have_toolchain, write_config

GRAPH_TIME_LIMIT = 1.0  # seconds, criterion 1
MP_TIME_LIMIT = 5.0  # seconds, criterion 2
MP_MAX_NODES, MP_MAX_LEN, MP_GRAPHS = 12, 5, 25
REL_TOL = 1e-9  # criteria 4 and 6
SKIP_SWEEP = 1_000
CAMPAIGNS = 200
QUANTUM = 1.0
LEV_PAIRS, LEV_MAX_LEN = 10_000, 8
ENERGY_CASES = 10_000
ALGEBRA_CASES = 1_000
E2E_RUNS, E2E_REQUIRED, E2E_BUDGET = 10, 9, 30  # 30s is well inside the 5-minute limit
MAX_REPAIRS, MAX_MUTATIONS = 3, 1


# -- 1 ---------------------------------------------------------------------------------


def _brute_edge(model, a, b) -> bool:
    """Ordered-pair predicate written out directly: some parameter of b has
    a's non-primitive return type (qualifiers ignored; equal pointer depth,
    or value versus single pointer)."""
    if a.needs_oracle or b.needs_oracle:
        return False
    try:
        r = model.normalize(a.return_type)
    except Exception:
        return False
    if r.is_primitive:
        return False
    for p in b.params:
        try:
            t = model.normalize(p.type)
        except Exception:
            continue
        if t.is_primitive or t.base != r.base:
            continue
        if t.pointer_depth == r.pointer_depth or sorted((t.pointer_depth, r.pointer_depth)) == [0, 1]:
            return True
    return False


def test_criterion_1_compat_graph_matches_brute_force(criterion):
    with criterion(1, "compatibility graph equals brute-force pair evaluation") as c:
        for lib in LIBS:
            model = scan_library(FIXTURES / lib)
            assert len(model.apis) <= 15
            t0 = time.perf_counter()
            g = build_compat_graph(model)
            elapsed = time.perf_counter() - t0
            brute = {(a.name, b.name) for a in model.apis for b in model.apis if _brute_edge(model, a, b)}
            assert set(g.edges) == brute, lib
            assert elapsed < GRAPH_TIME_LIMIT, (lib, elapsed)
            c.note(f"{lib}: {len(brute)} edges")


# -- 2 ----------------------------------------------------------------------------------


def _exhaustive(nodes, edges, starts, max_len):
    out = {s: set() for s in starts}
    for k in range(1, max_len + 1):
        for perm in itertools.permutations(nodes, k):
            if perm[0] in out and all((x, y) in edges for x, y in zip(perm, perm[1:])):
                out[perm[0]].add(perm)
    return out


def test_criterion_2_mp_paths_match_exhaustive_enumeration(criterion):
    with criterion(2, "MP pre-sampling paths equal exhaustive enumeration") as c:
        rng = random.Random(2)
        worst = 0.0
        for _ in range(MP_GRAPHS):
            n = rng.randint(2, MP_MAX_NODES)
            nodes = tuple(f"n{i:02d}" for i in range(n))
            density = rng.uniform(0.05, 0.35)
            edges = frozenset((a, b) for a in nodes for b in nodes if rng.random() < density)
            g = CompatibilityGraph(nodes, edges)
            L = rng.randint(2, MP_MAX_LEN)
            t0 = time.perf_counter()
            got = enumerate_mp_paths(g, L)
            worst = max(worst, time.perf_counter() - t0)
            want = _exhaustive(nodes, edges, start_nodes(g), L)
            assert {s: set(p) for s, p in got.items()} == want
            assert all(len(p) == len(set(p)) for p in got.values())
        assert worst < MP_TIME_LIMIT
        c.note(f"{MP_GRAPHS} graphs, slowest {worst:.3f}s")


# -- 3 -----------------------------------------------------------------------------------


XLSX_SEQUENCE = ("workbook_new", "workbook_add_worksheet", "workbook_add_format", "format_set_bold",
                 "worksheet_write_number", "worksheet_write_array_formula", "workbook_close")


def test_criterion_3_ue_mining_ground_truth(criterion):
    with criterion(3, "UE sequence of the xlsx-style fixture equals the 7-call ground truth"):
        seqs = mine_usage_sequences(scan_library(FIXTURES / "minixlsx"))
        assert XLSX_SEQUENCE in [s.apis for s in seqs]


# -- 4 -----------------------------------------------------------------------------------


def _ledger_with(cov_pairs):
    """Ledger over APIs A0..Ak whose covered/total pairs are given."""
    totals, spans, branches = {}, [], []
    for i, (covered, total) in enumerate(cov_pairs):
        api = f"A{i}"
        totals[api] = total
        spans.append((1000 * i + 1, 1000 * i + 999, api))
        branches += [f"lib.c:{1000 * i + 1 + j}:0" for j in range(covered)]
    led = CoverageLedger(totals, spans={"lib.c": spans})
    ingest_coverage({"format": SIM_FORMAT, "branches": branches}, led)
    return led


def _hand_assign(T, n, i, cov, omega, cfg):
    alpha = min(max(cfg.base ** (i / n - 1), cfg.alpha_min), cfg.alpha_max)
    t = T / n * alpha
    val = t / max(cov, cfg.beta) * omega
    if val > 0:
        val = max(val, cfg.quantum)
    return min(val, T)


def test_criterion_4_scheduler_formula_conformance(criterion):
    with criterion(4, "assign_time matches hand-evaluated values; skip fires exactly above theta") as c:
        cfg = SchedulerConfig(total_budget=1200)
        led = _ledger_with([(1, 10)])
        st = CampaignState(led, SequenceHistory(), 1200.0, 4)
        drv = FuzzDriver("d1", "A0", "", state=DriverState.COMPILED, sequence=("A0",), tags=("MP",))
        dec = assign_time(drv, 0, st, cfg)
        assert dec.assigned_time == pytest.approx(750.0, rel=REL_TOL)

        rng = random.Random(4)
        skips = 0
        for _ in range(SKIP_SWEEP):
            scfg = SchedulerConfig(theta=rng.choice([0.5, 0.8, 0.9, 1.0]), beta=rng.uniform(0.05, 1.0),
                                   base=rng.uniform(1.1, 4), alpha_min=rng.uniform(0.1, 0.9),
                                   alpha_max=rng.uniform(1.0, 3.0), total_budget=1000, quantum=1.0)
            pairs = [(k, tot) for tot in [rng.randint(1, 20) for _ in range(rng.randint(1, 3))]
                     for k in [rng.randint(0, tot)]]
            led = _ledger_with(pairs)
            apis = tuple(led.totals)
            n = rng.randint(1, 10)
            i = rng.randrange(n)
            T = rng.uniform(1, 5000)
            st = CampaignState(led, SequenceHistory(), T, n)
            drv = FuzzDriver("d", apis[0], "", state=DriverState.COMPILED, sequence=apis, tags=("MP",) * len(apis))
            dec = assign_time(drv, i, st, scfg)
            cov = sum(k for k, _ in pairs) / sum(t for _, t in pairs)
            assert dec.avg_cov == pytest.approx(cov, rel=REL_TOL)
            if cov > scfg.theta:
                skips += 1
                assert dec.action == "skip" and dec.assigned_time == 0
            else:
                assert dec.action == "execute"
                assert dec.assigned_time == pytest.approx(_hand_assign(T, n, i, cov, 1.0, scfg), rel=REL_TOL)
        c.note(f"{SKIP_SWEEP} states, {skips} skips")


# -- 5 -----------------------------------------------------------------------------------


def _sim_campaign(seed):
    rng = random.Random(seed)
    apis = [f"A{i}" for i in range(rng.randint(1, 5))]
    totals = {a: rng.randint(0, 15) for a in apis}
    spans = [(100 * i + 1, 100 * i + 99, a) for i, a in enumerate(apis)]
    led = CoverageLedger(totals, spans={"lib.c": spans})
    curves = {}
    for i, a in enumerate(apis):
        pts = [(round(rng.uniform(0, 200), 3), f"lib.c:{100 * i + 1 + j}:0") for j in range(totals[a])]
        curves[a] = [p for p in pts if rng.random() < 0.8]
    crash_at = [] if rng.random() < 0.5 else [rng.uniform(0, 100)]
    from masfuzz.executor import SimCrash

    spec = SimSpec(curves, [SimCrash(rng.choice(apis), t) for t in crash_at], seed)
    n = rng.randint(1, 8)
    drivers = [FuzzDriver(f"d{k:04d}", apis[0], "", state=DriverState.COMPILED,
                          sequence=tuple(rng.sample(apis, rng.randint(1, len(apis)))), tags=())
               for k in range(n)]
    for d in drivers:
        d.tags = ("MP",) * len(d.sequence)
    T = rng.uniform(1, 600)
    return drivers, spec, led, T, rng


def test_criterion_5_budget_conservation(criterion):
    with criterion(5, "simulated campaigns never exceed T + 1 quantum") as c:
        violations = 0
        for seed in range(CAMPAIGNS):
            drivers, spec, led, T, rng = _sim_campaign(seed)
            cfg = SchedulerConfig(total_budget=T, quantum=QUANTUM)
            st = CampaignState(led, SequenceHistory(), T, len(drivers))
            counter = itertools.count(9000)

            def mutate(parent, state):
                parent.transition(DriverState.MUTATED)
                child = FuzzDriver(f"d{next(counter)}", parent.target_api, "", state=DriverState.COMPILED,
                                   sequence=parent.sequence, tags=parent.tags, lineage=parent.id)
                return child, {}

            run_campaign(drivers, SimulatedExecutor(spec), cfg, st, mutate=mutate)
            if st.consumed > T + QUANTUM + 1e-9:
                violations += 1
        assert violations == 0
        c.note(f"{CAMPAIGNS} campaigns, {violations} violations")


# -- 6 ------------------------------------------------------------------------------------


def _oracle_lev(a, b, w):
    wd = dict(w)

    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == len(a):
            return sum(wd.get(t[1], 1.0) for t in b[j:])
        if j == len(b):
            return sum(wd.get(t[1], 1.0) for t in a[i:])
        ca, cb = wd.get(a[i][1], 1.0), wd.get(b[j][1], 1.0)
        sub = 0.0 if a[i][0] == b[j][0] else max(ca, cb)
        return min(d(i + 1, j) + ca, d(i, j + 1) + cb, d(i + 1, j + 1) + sub)

    return d(0, 0)


def test_criterion_6_levenshtein_matches_recursive_oracle(criterion):
    with criterion(6, "weighted Levenshtein equals the recursive oracle") as c:
        rng = random.Random(6)
        dims = ("UE", "MP", "SEM")
        for k in range(LEV_PAIRS):
            def seq():
                return tuple((rng.choice("ABCDE"), rng.choice(dims)) for _ in range(rng.randint(0, LEV_MAX_LEN)))

            a, b = seq(), seq()
            if k % 2 == 0:
                assert weighted_levenshtein(a, b) == _oracle_lev(a, b, ())
            else:
                w = {d: rng.uniform(0.1, 3.0) for d in dims}
                got, want = weighted_levenshtein(a, b, w), _oracle_lev(a, b, tuple(w.items()))
                assert abs(got - want) <= REL_TOL * max(1.0, abs(want))
        c.note(f"{LEV_PAIRS} pairs")


# -- 7 ------------------------------------------------------------------------------------


def test_criterion_7_energy_laws(criterion):
    with criterion(7, "energy is non-negative, zero at cov=1 or freq=1, linear in potential") as c:
        rng = random.Random(7)
        for _ in range(ENERGY_CASES):
            cov, freq, pot = rng.random(), rng.random(), rng.randint(0, 500)
            e = energy_of(cov, freq, pot)
            assert e >= 0
            assert energy_of(1.0, freq, pot) == 0
            assert energy_of(cov, 1.0, pot) == 0
            k = rng.randint(0, 6)
            assert energy_of(cov, freq, k * pot) == pytest.approx(k * e, rel=1e-12, abs=1e-12)
        assert energy_of(0.5, 0.5, 4) == 1.0
        c.note(f"{ENERGY_CASES} cases")


# -- 8 ------------------------------------------------------------------------------------


def test_criterion_8_mutation_algebra(criterion):
    with criterion(8, "Insert/Replace/Combine equal direct list operations") as c:
        rng = random.Random(8)
        for _ in range(ALGEBRA_CASES):
            parent = [rng.choice("ABCDEFG") for _ in range(rng.randint(1, 8))]
            inj = tuple(rng.choice("VWXYZ") for _ in range(rng.randint(1, 5)))
            k = rng.randint(0, len(parent))
            i = rng.randrange(len(parent))
            j = rng.randint(i + 1, len(parent))
            want_insert = parent[:k] + list(inj) + parent[k:]
            want_replace = parent[:i] + list(inj) + parent[j:]
            assert insert(parent, inj, k) == tuple(want_insert)
            assert replace(parent, inj, i, j) == tuple(want_replace)
            assert combine(parent, inj) == tuple(parent + list(inj))
            assert MutationPlan("d", Strategy.INSERT, inj[0], "s", inj, position=k).target_sequence(parent) \
                == tuple(want_insert)
            assert MutationPlan("d", Strategy.REPLACE, inj[0], "s", inj, span=(i, j)).target_sequence(parent) \
                == tuple(want_replace)
        assert insert(["A", "B"], ["C", "D"], 1) == ("A", "C", "D", "B")
        assert replace(["A", "B", "C"], ["X", "Y"], 1, 2) == ("A", "X", "Y", "C")
        assert combine(["A", "B"], ["C"]) == ("A", "B", "C")
        c.note(f"{ALGEBRA_CASES} cases")


# -- 9 ------------------------------------------------------------------------------------


@pytest.mark.toolchain
def test_criterion_9_end_to_end_bug_discovery(criterion, tmp_path):
    with criterion(9, f"real miniplist campaign finds the planted library bug in >= {E2E_REQUIRED}/{E2E_RUNS} runs") as c:
        if not have_toolchain():
            pytest.skip("clang/gcc/gcov not available")
        hits = []
        for seed in range(1, E2E_RUNS + 1):
            work = tmp_path / f"run{seed}"
            cfg = write_config(work, "miniplist", oracles="stub", scheduler={"total_budget": E2E_BUDGET})
            proc = subprocess.run([sys.executable, "-m", "masfuzz.cli", "run", "--config", str(cfg),
                                   "--seed", str(seed)], capture_output=True, text=True, timeout=600)
            assert proc.returncode in (0, 3), proc.stderr[-2000:]
            rep = json.loads((work / "work" / "report.json").read_text())
            found = any(
                r["classification"] == "library_bug"
                and {"render_ref", "mp_to_text"} & {f[0] for f in r["stack"]}
                for r in rep["crashes"]["records"]
            )
            hits.append(found)
        c.note(f"{sum(hits)}/{E2E_RUNS} runs, budget {E2E_BUDGET}s")
        assert sum(hits) >= E2E_REQUIRED


# -- 10 -----------------------------------------------------------------------------------


def test_criterion_10_determinism(criterion, tmp_path):
    with criterion(10, "stub oracles + simulator + same seed give byte-identical reports") as c:
        for lib in LIBS:
            outs = []
            for tag in ("a", "b"):
                p = write_config(tmp_path / lib / tag, lib, oracles="stub",
                                 executor={"kind": "simulated", "simspec": "auto"},
                                 scheduler={"total_budget": 120}, rng_seed=11)
                pipeline.run(CampaignConfig.load(p))
                outs.append((tmp_path / lib / tag / "work" / "report.json").read_bytes())
            assert outs[0] == outs[1], lib
        c.note(f"{len(LIBS)} fixtures")


# -- 11 -----------------------------------------------------------------------------------


class _BrokenCompiler:
    def compile(self, driver):
        return CompileResult(False, "error: injected failure")


def test_criterion_11_repair_and_mutation_caps(criterion, tmp_path, monkeypatch):
    with criterion(11, f"at most {MAX_REPAIRS} repairs per driver and {MAX_MUTATIONS} mutation per stagnant driver") as c:
        model = scan_library(FIXTURES / "minimath")
        # injected compile errors: the driver is retired after the third repair
        d = FuzzDriver("d0001", "add", "int LLVMFuzzerTestOneInput(const unsigned char *d, unsigned long n) { return 0; }\n")
        compile_with_repair(d, _BrokenCompiler(), StubOracle(), model)
        assert d.repair_attempts == MAX_REPAIRS and d.state is DriverState.RETIRED
        from masfuzz.synthesis import repair_driver

        d2 = FuzzDriver("d0002", "add", d.source, state=DriverState.COMPILE_FAILED, repair_attempts=MAX_REPAIRS)
        with pytest.raises(PreconditionError):
            repair_driver(d2, "error", StubOracle(), model)
        with pytest.raises(StateTransitionError):
            d.transition(DriverState.COMPILED)

        # the same cap inside the pipeline: every generated driver fails to build
        monkeypatch.setattr(pipeline, "make_compiler", lambda ws, m: _BrokenCompiler())
        p = write_config(tmp_path / "broken", "miniplist", oracles="stub",
                         executor={"kind": "simulated", "simspec": "auto"}, scheduler={"total_budget": 30})
        ws = pipeline.Workspace(CampaignConfig.load(p))
        pipeline.mine(ws)
        drivers = pipeline.generate(ws)
        assert drivers and all(x.repair_attempts <= MAX_REPAIRS and x.state is DriverState.RETIRED for x in drivers)
        monkeypatch.undo()

        # an executor that never reports new coverage: each driver mutated once, children never
        def empty(self, driver, budget):
            return ExecutionResult(driver.id, budget, {"format": SIM_FORMAT, "branches": []}, [], 1)

        monkeypatch.setattr(SimulatedExecutor, "execute", empty)
        p = write_config(tmp_path / "stagnant", "miniplist", oracles="stub",
                         executor={"kind": "simulated", "simspec": "auto"}, scheduler={"total_budget": 600})
        cfg = CampaignConfig.load(p)
        pipeline.run(cfg)
        camp = json.loads((cfg.workdir / "campaign.json").read_text())
        parents = [x for x in camp["drivers"] if x["state"] != "compiled"]
        assert parents
        assert all(x["mutations"] <= MAX_MUTATIONS for x in camp["drivers"])
        assert all(x["mutations"] == 0 for x in camp["children"])
        executed = {r["driver"] for e in camp["state"]["entries"] for r in e.get("runs", [])}
        mutated = [e["driver"] for e in camp["state"]["entries"] if "mutation" in e]
        assert len(mutated) == len(set(mutated))
        assert set(mutated) == {e["driver"] for e in camp["state"]["entries"] if e.get("runs")}
        c.note(f"{len(mutated)} stagnant drivers mutated once each, {len(executed)} drivers executed")
