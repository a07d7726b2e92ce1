"""Command-line entry point: ``masfuzz run|mine|generate|schedule|triage|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import CampaignConfig
from .errors import ConfigError, DependencyError, MasfuzzError

EXIT_FATAL = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="masfuzz", description="Fuzz-driver synthesis and scheduling campaigns.")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("run", "run every stage, resuming from checkpoints"),
        ("mine", "scan the library and mine API sequences"),
        ("generate", "generate, compile and seed drivers"),
        ("schedule", "run the coverage-guided schedule"),
        ("triage", "deduplicate and classify crashes"),
        ("report", "write report.json, report.txt and coverage_curve.csv"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="campaign config (YAML or JSON)")
        p.add_argument("--seed", type=int, help="override rng_seed")
        p.add_argument("--budget", help="override the total time budget (e.g. 300, 5m, 1h)")
        p.add_argument("--stub-oracles", action="store_true", help="use the deterministic stub for every oracle role")
        p.add_argument("--simulate", metavar="SIMSPEC",
                       help="use the coverage simulator with this spec file, or 'auto'")
        p.add_argument("--workdir", help="override the working directory")
        if name == "schedule":
            p.add_argument("--dry-run", action="store_true", help="print decisions without executing")
    return ap


def _summary(rep: dict) -> str:
    s = rep["crashes"]["summary"]
    return (f"status={rep['status']} branches={rep['coverage']['global_branches']} "
            f"drivers={len(rep['drivers'])} crashes={s['unique_crashes']} library_bugs={s['library_bugs']}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed, "budget": args.budget, "stub_oracles": args.stub_oracles,
                 "simulate": args.simulate, "workdir": args.workdir}
    try:
        cfg = CampaignConfig.load(args.config, overrides)
        ws = pipeline.Workspace(cfg)
        cmd = args.command
        if cmd == "run":
            rep = pipeline.run(cfg)
            print(_summary(rep))
            return pipeline.exit_code(rep["status"])
        if cmd == "mine":
            stats = pipeline.mine(ws)
            print(json.dumps(stats, indent=1, sort_keys=True))
        elif cmd == "generate":
            drivers = pipeline.generate(ws)
            for d in drivers:
                print(f"{d.id} {d.target_api} {d.state.value} {' -> '.join(d.sequence)}")
        elif cmd == "schedule":
            if args.dry_run:
                for dec in pipeline.dry_run(ws):
                    print(json.dumps(dec.to_json(), sort_keys=True))
                return 0
            status = pipeline.schedule(ws)
            print(f"status={status}")
            return pipeline.exit_code(status)
        elif cmd == "triage":
            out = pipeline.triage(ws)
            print(json.dumps(out["summary"], sort_keys=True))
        elif cmd == "report":
            rep = pipeline.report(ws)
            print(ws.path("report.txt").read_text(), end="")
            return pipeline.exit_code(rep["status"])
        return 0
    except (ConfigError, DependencyError) as exc:
        print(f"masfuzz: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MasfuzzError as exc:
        print(f"masfuzz: fatal: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
