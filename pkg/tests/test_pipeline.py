from __future__ import annotations

import json

import pytest
import yaml

from masfuzz import cli, pipeline
from masfuzz.config import CampaignConfig, parse_duration
from masfuzz.errors import ConfigError, DependencyError
from masfuzz.sequences import SequencePool

from conftest import FIXTURES, write_config

SIM = {"oracles": "stub", "executor": {"kind": "simulated", "simspec": "auto"},
       "scheduler": {"total_budget": 60}}


def _cfg(tmp_path, lib="miniplist", **extra):
    return CampaignConfig.load(write_config(tmp_path, lib, **{**SIM, **extra}))


# -- configuration -----------------------------------------------------------------


def test_parse_duration():
    assert parse_duration(90) == 90.0
    assert parse_duration("1.5") == 1.5
    assert parse_duration("500ms") == 0.5
    assert parse_duration("5m") == 300.0
    assert parse_duration("2h") == 7200.0
    assert parse_duration("1d") == 86400.0
    for bad in ("", "abc", "-3s", "5 parsecs"):
        with pytest.raises(ConfigError):
            parse_duration(bad)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        CampaignConfig.from_dict({"workdir": "w"})
    with pytest.raises(ConfigError):
        CampaignConfig.from_dict({"library": {"root": str(tmp_path / "missing")}})
    root = str(FIXTURES / "minimath")
    with pytest.raises(ConfigError):
        CampaignConfig.from_dict({"library": {"root": root}, "oracles": {"planner": "stub"}})
    with pytest.raises(ConfigError):
        CampaignConfig.from_dict({"library": {"root": root}, "executor": {"kind": "qemu"}})
    with pytest.raises(ConfigError):
        CampaignConfig.from_dict({"library": {"root": root}, "scheduler": {"theta": 2}})
    p = tmp_path / "bad.yaml"
    p.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        CampaignConfig.load(p)


def test_overrides_and_fingerprints(tmp_path):
    p = write_config(tmp_path, "minimath")
    base = CampaignConfig.load(p)
    assert not base.simulated
    cfg = CampaignConfig.load(p, {"seed": 9, "budget": "2m", "stub_oracles": True, "simulate": "auto"})
    assert cfg.rng_seed == 9 and cfg.miner.rng_seed == 9
    assert cfg.scheduler_config().total_budget == 120.0
    assert cfg.simulated and cfg.oracles["analysis"] == "stub"
    assert cfg.fingerprint("library") == base.fingerprint("library")
    assert cfg.fingerprint("scheduler") != base.fingerprint("scheduler")


# -- stages ------------------------------------------------------------------------


def test_mine_then_generate_populates_drivers(tmp_path):
    ws = pipeline.Workspace(_cfg(tmp_path))
    stats = pipeline.mine(ws)
    assert stats["MP"]["count"] > 0 and stats["SEM"]["count"] == 4
    for f in ("model.json", "sequences.json", "graph.json", "semantics.json", "state.json"):
        assert ws.path(f).exists()
    drivers = pipeline.generate(ws)
    targets = {d.target_api for d in drivers}
    assert targets == set(ws.model().names)
    files = sorted(p.name for p in ws.path("drivers").iterdir())
    assert files == sorted(d.filename for d in drivers)
    assert all((ws.path("corpus") / d.id).is_dir() for d in drivers if d.state.value == "compiled")
    # the mined pool on disk stays pristine; consumption lives in drivers.json
    assert not any(s.used for s in SequencePool.load(ws.path("sequences.json")))
    assert json.loads(ws.path("drivers.json").read_text())["used_sequences"]


def test_mine_checkpoint_reproduces_pools(tmp_path):
    a = pipeline.Workspace(_cfg(tmp_path / "a"))
    b = pipeline.Workspace(_cfg(tmp_path / "b"))
    pipeline.mine(a)
    pipeline.mine(b)
    assert a.path("sequences.json").read_bytes() == b.path("sequences.json").read_bytes()
    assert a.done("mine")
    before = a.path("sequences.json").stat().st_mtime_ns
    pipeline.run(a.cfg)
    assert a.path("sequences.json").stat().st_mtime_ns == before


def test_stage_dependencies(tmp_path):
    ws = pipeline.Workspace(_cfg(tmp_path))
    for stage in (pipeline.generate, pipeline.schedule, pipeline.triage, pipeline.report):
        with pytest.raises(DependencyError):
            stage(ws)


def test_dry_run_executes_nothing(tmp_path):
    ws = pipeline.Workspace(_cfg(tmp_path))
    pipeline.mine(ws)
    drivers = pipeline.generate(ws)
    decisions = pipeline.dry_run(ws)
    compiled = [d for d in drivers if d.state.value == "compiled"]
    assert len(decisions) == len(compiled)
    assert all(d.action == "execute" and d.assigned_time > 0 for d in decisions)
    assert not ws.path("campaign.json").exists()


class _Interrupt(Exception):
    pass


def test_resume_after_interrupted_schedule(tmp_path):
    ref = pipeline.run(_cfg(tmp_path / "ref"))

    cfg = _cfg(tmp_path / "cut")
    calls = {"n": 0}

    def crash_on_third(state):
        calls["n"] += 1
        if calls["n"] == 3:
            raise _Interrupt

    with pytest.raises(_Interrupt):
        pipeline.run(cfg, on_iteration=crash_on_third)
    doc = json.loads((cfg.workdir / "campaign.json").read_text())
    assert doc["status"] is None
    resumed = pipeline.run(cfg)
    assert resumed == ref
    assert (cfg.workdir / "report.json").read_bytes() == (tmp_path / "ref" / "work" / "report.json").read_bytes()


@pytest.mark.parametrize("lib", ["minimath", "miniplist", "minicjson", "minixlsx", "minicares"])
def test_end_to_end_has_a_driver_per_api(tmp_path, lib):
    cfg = _cfg(tmp_path, lib)
    rep = pipeline.run(cfg)
    assert rep["schema"] == "masfuzz.report/1"
    assert rep["status"] in ("completed", "budget_exhausted")
    assert {d["target_api"] for d in rep["drivers"]} >= set(pipeline.Workspace(cfg).model().names)
    text = (cfg.workdir / "report.json").read_text()
    assert str(tmp_path) not in text
    assert (cfg.workdir / "coverage_curve.csv").read_text().startswith("time")
    assert json.loads((cfg.workdir / "timings.json").read_text()).keys() >= {"mine", "generate", "schedule"}


def test_runs_are_deterministic(tmp_path):
    pipeline.run(_cfg(tmp_path / "a", "minicjson"))
    pipeline.run(_cfg(tmp_path / "b", "minicjson"))
    for f in ("report.json", "report.txt", "coverage_curve.csv", "triage.json"):
        assert (tmp_path / "a" / "work" / f).read_bytes() == (tmp_path / "b" / "work" / f).read_bytes(), f


def test_budget_is_respected(tmp_path):
    rep = pipeline.run(_cfg(tmp_path, "miniplist", scheduler={"total_budget": 20}))
    assert rep["budget"]["consumed"] <= 20 + 1


# -- CLI ------------------------------------------------------------------------------


def test_cli_report_on_empty_workdir_is_usage_error(tmp_path, capsys):
    p = write_config(tmp_path, "minimath", **SIM)
    assert cli.main(["report", "--config", str(p)]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_missing_root_is_usage_error(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"library": {"root": str(tmp_path / "nope")}}))
    assert cli.main(["run", "--config", str(p)]) == 2


def test_cli_stages_and_dry_run(tmp_path, capsys):
    p = str(write_config(tmp_path, "minimath"))
    flags = ["--config", p, "--stub-oracles", "--simulate", "auto", "--budget", "30"]
    assert cli.main(["mine", *flags]) == 0
    assert cli.main(["generate", *flags]) == 0
    capsys.readouterr()
    assert cli.main(["schedule", "--dry-run", *flags]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert {x["action"] for x in lines} == {"execute"}
    code = cli.main(["schedule", *flags])
    assert code in (0, 3)
    assert cli.main(["triage", *flags]) == 0
    assert cli.main(["report", *flags]) == code
    assert "status=" not in capsys.readouterr().err


def test_cli_run_exit_codes(tmp_path, capsys):
    p = str(write_config(tmp_path, "minicjson"))
    code = cli.main(["run", "--config", p, "--stub-oracles", "--simulate", "auto", "--budget", "60"])
    out = capsys.readouterr().out
    rep = json.loads((tmp_path / "work" / "report.json").read_text())
    assert code == pipeline.exit_code(rep["status"])
    assert out.startswith(f"status={rep['status']}")
