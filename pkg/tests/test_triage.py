from __future__ import annotations

import json

import pytest

from masfuzz.errors import PreconditionError, StateTransitionError
from masfuzz.oracles import StubOracle
from masfuzz.synthesis import DriverState, FuzzDriver, NullCompiler, compile_with_repair
from masfuzz.triage import (
    Frame,
    FrameContext,
    RawCrash,
    classify,
    dedup,
    dedup_key,
    format_report,
    parse_stack,
    repair_misuse,
    sanitizer_kind,
    summary_table,
    to_record,
    write_artifacts,
)

DRIVER_FRAME = ("LLVMFuzzerTestOneInput", "drivers/d0001_mp_to_text.c", 20)


def _crash(frames, kind="addr-violation", data=b"x", driver="d0001"):
    return RawCrash(driver, data, format_report(kind, [*frames, DRIVER_FRAME]))


RENDER_BUG = [("render_ref", "src/miniplist.c", 88), ("mp_to_text", "src/miniplist.c", 120)]
GET_TYPE = [("mp_get_type", "src/miniplist.c", 70)]


@pytest.fixture
def ctx(plist):
    return FrameContext.from_model(plist)


# -- parsing ----------------------------------------------------------------------


def test_parse_asan_stack():
    report = (
        "==12==ERROR: AddressSanitizer: SEGV on unknown address 0x000000000000\n"
        "    #0 0x55d1 in render_ref /abs/lib/src/miniplist.c:88:12\n"
        "    #1 0x55d2 in mp_to_text /abs/lib/src/miniplist.c:120:5\n"
        "    #2 0x55d3 in LLVMFuzzerTestOneInput /w/build/d0003/d0003_mp_free.c:40:3\n"
        "    #3 0x55d4 in fuzzer::Fuzzer::ExecuteCallback(unsigned char const*, unsigned long) :?\n"
        "    #4 0x55d5  (/lib/x86_64-linux-gnu/libc.so.6+0x29d90)\n"
        "\n"
        "    #0 0x1 in other_trace x.c:1\n"
    )
    frames = parse_stack(report)
    assert [f.symbol for f in frames] == ["render_ref", "mp_to_text", "LLVMFuzzerTestOneInput",
                                         "fuzzer::Fuzzer::ExecuteCallback", "??"]
    assert frames[0] == Frame("render_ref", "/abs/lib/src/miniplist.c", 88)
    assert frames[3].file is None
    assert sanitizer_kind(report) == "addr-violation"


@pytest.mark.parametrize("text,kind", [
    ("==1==WARNING: MemorySanitizer: use-of-uninitialized-value", "uninit-read"),
    ("==1==ERROR: LeakSanitizer: detected memory leaks", "leak"),
    ("==1== ERROR: libFuzzer: timeout after 25 seconds", "timeout"),
    ("a.out: x.c:3: f: Assertion `p' failed.", "assertion"),
    ("==1==ERROR: libFuzzer: deadly signal", "other"),
])
def test_sanitizer_kinds(text, kind):
    assert sanitizer_kind(text) == kind


def test_records_have_no_host_paths(tmp_path, plist, ctx):
    abs_file = f"{plist.root}/src/miniplist.c"
    rec = to_record(_crash([("render_ref", abs_file, 88)]), ctx)
    assert rec.stack[0].file == "src/miniplist.c"
    assert rec.stack[1].file == "drivers/d0001_mp_to_text.c"


# -- dedup ------------------------------------------------------------------------


def test_same_frames_dedup_to_one(ctx):
    recs = dedup([_crash(RENDER_BUG, data=b"a"), _crash(RENDER_BUG, data=b"b", driver="d0002"),
                  _crash(RENDER_BUG, data=b"a")], ctx)
    assert len(recs) == 1
    assert recs[0].driver_id == "d0001"
    assert len(recs[0].alternates) == 1 and recs[0].alternate_inputs == [b"b"]


def test_different_kinds_stay_apart(ctx):
    recs = dedup([_crash(RENDER_BUG), _crash(RENDER_BUG, kind="leak")], ctx)
    assert len(recs) == 2
    assert {r.sanitizer_kind for r in recs} == {"addr-violation", "leak"}


def test_two_planted_bugs_give_two_records(ctx):
    recs = dedup([_crash(RENDER_BUG), _crash(GET_TYPE), _crash(RENDER_BUG)], ctx)
    assert len(recs) == 2


def test_key_ignores_frames_below_top_three(ctx):
    deep = [("render_ref", "src/miniplist.c", 88), ("mp_to_text", "src/miniplist.c", 120),
            ("mp_copy", "src/miniplist.c", 60)]
    a = to_record(_crash(deep + [("mp_free", "src/miniplist.c", 1)]), ctx)
    b = to_record(_crash(deep + [("mp_get_type", "src/miniplist.c", 2)]), ctx)
    assert a.dedup_key == b.dedup_key
    assert a.dedup_key.startswith("addr-violation-") and len(a.dedup_key.split("-")[-1]) == 12


def test_key_falls_back_to_driver_frames(ctx):
    k = dedup_key("addr-violation", (Frame("memcpy"), Frame("LLVMFuzzerTestOneInput", "d0001_x.c", 3)), ctx)
    k2 = dedup_key("addr-violation", (Frame("strlen"), Frame("LLVMFuzzerTestOneInput", "d0002_y.c", 9)), ctx)
    assert k == k2


def test_dedup_is_idempotent(ctx):
    once = dedup([_crash(RENDER_BUG, data=b"a"), _crash(RENDER_BUG, data=b"b"), _crash(GET_TYPE)], ctx)
    twice = dedup(once, ctx)
    assert [r.summary() for r in twice] == [r.summary() for r in once]


# -- classification ----------------------------------------------------------------


def test_documented_null_precondition_is_misuse(plist, ctx):
    rec = classify(to_record(_crash(GET_TYPE), ctx), "", plist, StubOracle(), ctx)
    assert rec.classification == "api_misuse"
    assert "must not be NULL" in rec.rationale


def test_fault_in_library_is_library_bug(plist, ctx):
    rec = classify(to_record(_crash(RENDER_BUG), ctx), "", plist, StubOracle(), ctx)
    assert rec.classification == "library_bug"
    assert "render_ref" in rec.rationale


def test_fault_in_driver_is_misuse(plist, ctx):
    rec = classify(to_record(_crash([]), ctx), "", plist, StubOracle(), ctx)
    assert rec.classification == "api_misuse"


def test_oracle_failure_leaves_unclassified_for_review(plist, ctx):
    oracle = StubOracle(overrides={"classify_crash": lambda p: json.dumps({"classification": "maybe"})})
    rec = classify(to_record(_crash(RENDER_BUG), ctx), "", plist, oracle, ctx)
    assert rec.classification == "unclassified" and rec.needs_review
    assert oracle.calls == ["classify_crash", "classify_crash"]
    assert summary_table([rec])["unclassified"] == 1


def test_classification_is_final(plist, ctx):
    rec = classify(to_record(_crash(RENDER_BUG), ctx), "", plist, StubOracle(), ctx)
    with pytest.raises(StateTransitionError):
        rec.classify_as("api_misuse", "changed my mind")
    with pytest.raises(StateTransitionError):
        classify(rec, "", plist, StubOracle(), ctx)
    with pytest.raises(ValueError):
        to_record(_crash(RENDER_BUG), ctx).classify_as("unclassified", "")


# -- misuse repair ---------------------------------------------------------------------


def _compiled(plist, seq):
    from masfuzz.render import DriverRenderer

    src = DriverRenderer(plist.apis, plist.types, plist.headers).render(seq, title="d0001")
    d = FuzzDriver("d0001", "mp_from_bytes", src, sequence=tuple(seq), tags=("MP",) * len(seq))
    compile_with_repair(d, NullCompiler(plist.headers), StubOracle(), plist)
    return d


def test_single_misuse_repair(plist, ctx):
    d = _compiled(plist, ["mp_from_bytes", "mp_get_type", "mp_free"])
    rec = classify(to_record(_crash(GET_TYPE), ctx), d.source, plist, StubOracle(), ctx)
    child = repair_misuse(rec, d, StubOracle(), plist, "d0002", ctx)
    assert child is not None and child.lineage == "d0001"
    assert "mp_get_type" not in child.sequence and "mp_from_bytes" in child.sequence
    assert child.state is DriverState.GENERATED
    assert d.misuse_repairs == 1
    with pytest.raises(PreconditionError):
        repair_misuse(rec, d, StubOracle(), plist, "d0003", ctx)


def test_misuse_repair_requires_misuse(plist, ctx):
    d = _compiled(plist, ["mp_from_bytes", "mp_to_text", "mp_free"])
    rec = classify(to_record(_crash(RENDER_BUG), ctx), d.source, plist, StubOracle(), ctx)
    with pytest.raises(PreconditionError):
        repair_misuse(rec, d, StubOracle(), plist, "d0002", ctx)


def test_artifacts(tmp_path, ctx):
    recs = dedup([_crash(RENDER_BUG, data=b"a"), _crash(RENDER_BUG, data=b"b")], ctx)
    write_artifacts(recs, tmp_path)
    d = tmp_path / recs[0].dedup_key
    assert (d / "input.bin").read_bytes() == b"a"
    assert len(list(d.glob("alt-*.bin"))) == 1
    assert json.loads((d / "triage.json").read_text())["dedup_key"] == recs[0].dedup_key
