"""Campaign configuration: one YAML/JSON file plus command-line overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .metainfo import ScanConfig
from .sequences import MinerConfig

ROLES = ("semantic", "generation", "analysis")
_DURATION = re.compile(r"^\s*(\d+(?:\.\d*)?|\.\d+)\s*(ms|s|m|min|h|d)?\s*$", re.I)
_UNITS = {None: 1.0, "ms": 1e-3, "s": 1.0, "m": 60.0, "min": 60.0, "h": 3600.0, "d": 86400.0}


def parse_duration(value: Any) -> float:
    """Seconds from ``300``, ``"300s"``, ``"5m"``, ``"1.5h"``..."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    m = _DURATION.match(str(value))
    if not m:
        raise ConfigError(f"cannot parse duration {value!r}")
    return float(m.group(1)) * _UNITS[m.group(2).lower() if m.group(2) else None]


def _oracle_spec(spec: Any, role: str) -> Any:
    if spec is None or spec == "stub":
        return "stub"
    if isinstance(spec, Mapping):
        backend = spec.get("backend", "stub")
        if backend == "stub":
            return "stub"
        if backend == "http":
            missing = {"endpoint", "model"} - set(spec)
            if missing:
                raise ConfigError(f"oracle {role}: http backend needs {sorted(missing)}")
            return dict(spec)
        raise ConfigError(f"oracle {role}: unknown backend {backend!r}")
    raise ConfigError(f"oracle {role}: expected 'stub' or a mapping, got {spec!r}")


@dataclass
class CampaignConfig:
    root: Path
    workdir: Path
    scan: ScanConfig = field(default_factory=ScanConfig)
    miner: MinerConfig = field(default_factory=MinerConfig)
    scheduler: dict[str, Any] = field(default_factory=dict)
    oracles: dict[str, Any] = field(default_factory=lambda: {r: "stub" for r in ROLES})
    compiler: dict[str, Any] = field(default_factory=dict)
    executor: dict[str, Any] = field(default_factory=lambda: {"kind": "libfuzzer"})
    weights: dict[str, float] = field(default_factory=lambda: {"UE": 1.0, "MP": 1.0, "SEM": 1.0})
    rng_seed: int = 0
    rounds: int = 1
    max_in_flight: int = 4
    raw: dict[str, Any] = field(default_factory=dict)

    @property
    def simulated(self) -> bool:
        return self.executor.get("kind") == "simulated"

    def scheduler_config(self):
        from .scheduler import SchedulerConfig

        return SchedulerConfig.from_dict(self.scheduler)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: str | Path = ".") -> "CampaignConfig":
        base = Path(base_dir)
        d = copy.deepcopy(dict(d))
        lib = d.get("library") or {}
        if "root" not in lib:
            raise ConfigError("library.root is required")
        root = (base / lib["root"]).resolve()
        workdir = (base / d.get("workdir", "masfuzz-work")).resolve()
        seed = int(d.get("rng_seed", 0))
        miner = dict(d.get("miner") or {})
        miner.setdefault("rng_seed", seed)
        oracles_in = d.get("oracles", {})
        if isinstance(oracles_in, str):
            oracles_in = {r: oracles_in for r in ROLES}
        unknown = set(oracles_in) - set(ROLES)
        if unknown:
            raise ConfigError(f"unknown oracle roles {sorted(unknown)}")
        oracles = {r: _oracle_spec(oracles_in.get(r), r) for r in ROLES}
        executor = dict(d.get("executor") or {"kind": "libfuzzer"})
        if executor.get("kind", "libfuzzer") not in ("libfuzzer", "simulated"):
            raise ConfigError(f"unknown executor kind {executor.get('kind')!r}")
        executor.setdefault("kind", "libfuzzer")
        sim = executor.get("simspec")
        if sim and sim != "auto":
            executor["simspec"] = str((base / sim).resolve())
        weights = {"UE": 1.0, "MP": 1.0, "SEM": 1.0} | dict(d.get("weights") or {})
        try:
            cfg = cls(
                root=root,
                workdir=workdir,
                scan=ScanConfig.from_dict(lib.get("scan")),
                miner=MinerConfig.from_dict(miner),
                scheduler=dict(d.get("scheduler") or {}),
                oracles=oracles,
                compiler=dict(d.get("compiler") or {}),
                executor=executor,
                weights={k: float(v) for k, v in weights.items()},
                rng_seed=seed,
                rounds=int(d.get("rounds", 1)),
                max_in_flight=int(d.get("max_in_flight", 4)),
                raw=d,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: Mapping[str, Any] | None = None) -> "CampaignConfig":
        p = Path(path)
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {p} is not valid YAML/JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {p} must be a mapping")
        return cls.from_dict(apply_overrides(doc, overrides or {}), p.parent)

    def validate(self) -> None:
        if not self.root.is_dir():
            raise ConfigError(f"library root {self.root} is not a directory")
        sim = self.executor.get("simspec")
        if sim and sim != "auto" and not Path(sim).is_file():
            raise ConfigError(f"simulation spec {sim} not found")
        if self.rounds < 1:
            raise ConfigError("rounds must be at least 1")
        if any(w <= 0 for w in self.weights.values()):
            raise ConfigError("dimension weights must be positive")
        try:
            self.scheduler_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"scheduler: {exc}") from exc

    def fingerprint(self, *sections: str) -> str:
        """Stable hash of the named config sections (all when none given)."""
        view = {
            "library": {"root": str(self.root), "scan": vars(self.scan)},
            "miner": vars(self.miner),
            "scheduler": self.scheduler,
            "oracles": self.oracles,
            "compiler": self.compiler,
            "executor": self.executor,
            "weights": self.weights,
            "rng_seed": self.rng_seed,
            "rounds": self.rounds,
        }
        if sections:
            view = {k: view[k] for k in sections}
        return hashlib.sha1(json.dumps(view, sort_keys=True, default=str).encode()).hexdigest()[:16]


def apply_overrides(doc: dict[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    """Apply command-line overrides: seed, budget, stub_oracles, simulate."""
    doc = copy.deepcopy(doc)
    if overrides.get("seed") is not None:
        doc["rng_seed"] = int(overrides["seed"])
        doc.setdefault("miner", {})
        if doc["miner"] is not None:
            doc["miner"].pop("rng_seed", None)
    if overrides.get("budget") is not None:
        doc.setdefault("scheduler", {})["total_budget"] = parse_duration(overrides["budget"])
    if overrides.get("stub_oracles"):
        doc["oracles"] = {r: "stub" for r in ROLES}
    if overrides.get("simulate"):
        ex = dict(doc.get("executor") or {})
        ex["kind"] = "simulated"
        ex["simspec"] = overrides["simulate"]
        doc["executor"] = ex
    if overrides.get("workdir"):
        doc["workdir"] = overrides["workdir"]
    return doc
