"""Driver execution: the libFuzzer-backed executor and a deterministic
coverage simulator."""

from __future__ import annotations

import json
import logging
import math
import os
import random
import re
import signal
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

from .coverage import SIM_FORMAT, CoverageReport, parse_gcov_json
from .errors import ExecutorError, PreconditionError
from .metainfo import LibraryModel
from .synthesis import FuzzDriver
from .triage import RawCrash, format_report

log = logging.getLogger(__name__)

SIMSPEC_SCHEMA = "masfuzz.simspec/1"


@dataclass
class ExecutionResult:
    driver_id: str
    t_actual: float
    coverage_report: Any = None
    crashes: list[RawCrash] = field(default_factory=list)
    executions: int = 0
    exit_reason: str = "budget"

    def __post_init__(self) -> None:
        if (self.executions > 0) != (self.coverage_report is not None):
            raise ValueError("a coverage report is present exactly when inputs were executed")


class DriverExecutor(Protocol):
    def execute(self, driver: FuzzDriver, budget: float) -> ExecutionResult: ...


# -- simulator --------------------------------------------------------------------------


@dataclass(frozen=True)
class SimCrash:
    key: str
    at: float
    kind: str = "addr-violation"
    frames: tuple[tuple[str, str | None, int | None], ...] = ()
    input: bytes = b"CRASH"

    def to_json(self) -> dict[str, Any]:
        return {"key": self.key, "at": self.at, "kind": self.kind,
                "frames": [list(f) for f in self.frames], "input": self.input.hex()}

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "SimCrash":
        return cls(d["key"], float(d["at"]), d.get("kind", "addr-violation"),
                   tuple(tuple(f) for f in d.get("frames", [])), bytes.fromhex(d.get("input", "")) or b"CRASH")


@dataclass
class SimSpec:
    """Coverage response curves keyed by driver id or API name: each curve
    lists (cumulative-time, branch) reveal points."""

    curves: dict[str, list[tuple[float, str]]] = field(default_factory=dict)
    crashes: list[SimCrash] = field(default_factory=list)
    seed: int = 0
    exec_rate: float = 1000.0

    def __post_init__(self) -> None:
        self.curves = {k: sorted((float(t), b) for t, b in v) for k, v in self.curves.items()}

    def curve_for(self, driver: FuzzDriver) -> list[tuple[float, str]]:
        if driver.id in self.curves:
            return self.curves[driver.id]
        keys = [a for a in dict.fromkeys(driver.sequence) if a in self.curves]
        if not keys:
            raise ExecutorError(f"simulation spec has no curve for driver {driver.id}")
        best: dict[str, float] = {}
        for k in keys:
            for t, b in self.curves[k]:
                if b not in best or t < best[b]:
                    best[b] = t
        return sorted((t, b) for b, t in best.items())

    @classmethod
    def synthesize(
        cls,
        model: LibraryModel,
        seed: int = 0,
        horizon: float = 600.0,
        unreachable: float = 0.15,
        crashes: Sequence[SimCrash] = (),
    ) -> "SimSpec":
        """Per-API curves over the API's own branch ids.  Reveal times are
        front-loaded over ``horizon``; a fraction of branches is never
        revealed."""
        rng = random.Random(f"simspec/{seed}")
        curves: dict[str, list[tuple[float, str]]] = {}
        for api in model.apis:
            total = model.branch_totals.get(api.name, 0)
            span = max(1, (api.end_line or api.line) - api.line + 1)
            pts = []
            for k in range(total):
                line = api.line + (k % span)
                bid = f"{api.file}:{line}:{k // span}"
                if rng.random() < unreachable:
                    continue
                pts.append((round(horizon * rng.random() ** 2.5, 6), bid))
            curves[api.name] = pts
        return cls(curves, list(crashes), seed)

    def to_json(self) -> dict[str, Any]:
        return {
            "schema": SIMSPEC_SCHEMA,
            "seed": self.seed,
            "exec_rate": self.exec_rate,
            "curves": {k: [[t, b] for t, b in v] for k, v in sorted(self.curves.items())},
            "crashes": [c.to_json() for c in self.crashes],
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "SimSpec":
        if d.get("schema") != SIMSPEC_SCHEMA:
            raise ValueError(f"not a simulation spec (schema {d.get('schema')!r})")
        return cls(
            {k: [(t, b) for t, b in v] for k, v in d.get("curves", {}).items()},
            [SimCrash.from_json(c) for c in d.get("crashes", [])],
            int(d.get("seed", 0)),
            float(d.get("exec_rate", 1000.0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SimSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


class SimulatedExecutor:
    """Replays a :class:`SimSpec`.  Each driver keeps its own cumulative
    clock; a call reveals the curve points falling in
    ``(clock, clock + budget]``, stopping early at a planted crash."""

    def __init__(self, spec: SimSpec):
        self.spec = spec
        self.clock: dict[str, float] = {}
        self.revealed: dict[str, set[str]] = {}

    def snapshot(self) -> dict[str, Any]:
        return {"clock": dict(sorted(self.clock.items())),
                "revealed": {k: sorted(v) for k, v in sorted(self.revealed.items())}}

    def restore(self, snap: Mapping[str, Any]) -> None:
        self.clock = {k: float(v) for k, v in snap.get("clock", {}).items()}
        self.revealed = {k: set(v) for k, v in snap.get("revealed", {}).items()}

    def execute(self, driver: FuzzDriver, budget: float) -> ExecutionResult:
        if not budget > 0:
            raise PreconditionError(f"execution budget must be positive, got {budget}")
        curve = self.spec.curve_for(driver)
        start = self.clock.get(driver.id, 0.0)
        end = start + budget
        crashes: list[RawCrash] = []
        for c in sorted(self.spec.crashes, key=lambda c: (c.at, c.key)):
            if (c.key == driver.id or c.key in driver.sequence) and start < c.at <= end:
                end = c.at
                frames = list(c.frames) or [(driver.sequence[0] if driver.sequence else "??", None, None)]
                frames.append(("LLVMFuzzerTestOneInput", f"drivers/{driver.filename}", 1))
                crashes.append(RawCrash(driver.id, c.input, format_report(c.kind, frames), None, c.at))
                break
        seen = self.revealed.setdefault(driver.id, set())
        upto = {b for t, b in curve if t <= end}
        seen |= upto
        self.clock[driver.id] = end
        t_actual = end - start
        executions = max(1, int(t_actual * self.spec.exec_rate))
        report = {"format": SIM_FORMAT, "branches": sorted(seen)}
        return ExecutionResult(driver.id, t_actual, report, crashes, executions,
                               "crash" if crashes else "budget")


def execute_simulated(driver: FuzzDriver, spec: SimSpec, budget: float,
                      executor: SimulatedExecutor | None = None) -> ExecutionResult:
    return (executor or SimulatedExecutor(spec)).execute(driver, budget)


# -- libFuzzer ----------------------------------------------------------------------------

_STAT = re.compile(r"stat::number_of_executed_units:\s*(\d+)")
_RUNS = re.compile(r"#(\d+)\s+(?:DONE|INITED|NEW|REDUCE|pulse|RELOAD)")


@dataclass
class LibFuzzerExecutor:
    """Runs the sanitizer binary under libFuzzer, then replays the evolved
    corpus through the gcov binary to measure library branch coverage."""

    workdir: str
    root: str
    build_dir: str
    grace: float = 1.0
    unit_timeout: int = 10
    rss_limit_mb: int = 2048
    seed: int = 0
    extra_args: list[str] = field(default_factory=list)
    replay_timeout: float = 120.0
    gcov: str = "gcov"

    def _paths(self, driver: FuzzDriver) -> tuple[Path, Path, Path, Path]:
        b = Path(self.build_dir) / driver.id
        return b / "fuzz", b / "cov" / "replay", Path(self.workdir) / "corpus" / driver.id, \
            Path(self.workdir) / "artifacts" / driver.id

    def _env(self) -> dict[str, str]:
        from .build import find_symbolizer

        env = dict(os.environ)
        opts = ["abort_on_error=0", "symbolize=1", "detect_leaks=1", "allocator_may_return_null=1"]
        sym = find_symbolizer()
        if sym:
            opts.append(f"{sym[0]}={sym[1]}")
        env.setdefault("ASAN_OPTIONS", ":".join(opts))
        env.setdefault("MSAN_OPTIONS", ":".join(o for o in opts if "leak" not in o))
        if sym:
            env.setdefault("LLVM_SYMBOLIZER_PATH", sym[1])
        return env

    def execute(self, driver: FuzzDriver, budget: float) -> ExecutionResult:
        if not budget > 0:
            raise PreconditionError(f"execution budget must be positive, got {budget}")
        binary, cov_bin, corpus, artifacts = self._paths(driver)
        if not binary.exists():
            raise ExecutorError(f"{driver.id}: fuzz binary {binary} missing")
        corpus.mkdir(parents=True, exist_ok=True)
        artifacts.mkdir(parents=True, exist_ok=True)
        before = {p.name for p in artifacts.iterdir()}
        seed = (self.seed * 1_000_003 + int(re.sub(r"\D", "", driver.id) or 0)) % (2**31 - 1) or 1
        cmd = [
            str(binary),
            f"-max_total_time={math.ceil(budget) + 1}",
            f"-timeout={self.unit_timeout}",
            f"-rss_limit_mb={self.rss_limit_mb}",
            f"-artifact_prefix={artifacts}/",
            f"-seed={seed}",
            "-print_final_stats=1",
            *self.extra_args,
            str(corpus),
        ]
        start = time.monotonic()
        try:
            proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                                    env=self._env(), start_new_session=True)
        except OSError as exc:
            raise ExecutorError(f"{driver.id}: cannot start {binary}: {exc}") from exc
        # libFuzzer checks -max_total_time once a second, so it can overrun by
        # up to a second; interrupt it at the budget and kill after the grace.
        killed = interrupted = False
        try:
            out, err = proc.communicate(timeout=budget)
        except subprocess.TimeoutExpired:
            interrupted = True
            proc.send_signal(signal.SIGINT)
            try:
                out, err = proc.communicate(timeout=self.grace)
            except subprocess.TimeoutExpired:
                killed = True
                os.killpg(proc.pid, signal.SIGKILL)
                out, err = proc.communicate()
        t_actual = time.monotonic() - start
        log_text = (out + err).decode(errors="replace")
        if "INFO: Seed:" not in log_text and not killed:
            raise ExecutorError(f"{driver.id}: fuzzer failed to start (exit {proc.returncode}):\n{log_text[-2000:]}")

        crashes: list[RawCrash] = []
        new_artifacts = sorted(p for p in artifacts.iterdir() if p.name not in before)
        for p in new_artifacts:
            crashes.append(RawCrash(driver.id, p.read_bytes(), log_text, str(p), t_actual))
        if proc.returncode not in (0, None) and not (killed or interrupted) and not crashes:
            crashes.append(RawCrash(driver.id, b"", log_text or format_report("other", []), None, t_actual))

        m = _STAT.search(log_text)
        executions = int(m.group(1)) if m else max((int(x) for x in _RUNS.findall(log_text)), default=0)
        if crashes and executions == 0:
            executions = 1
        report = None
        if executions > 0:
            inputs = sorted(p for p in corpus.iterdir() if p.is_file()) + new_artifacts
            report = self.collect_coverage(cov_bin, inputs) if cov_bin.exists() else CoverageReport(frozenset(), "none")
        reason = "crash" if crashes else ("killed" if killed else "budget")
        return ExecutionResult(driver.id, t_actual, report, crashes, executions, reason)

    def collect_coverage(self, cov_bin: Path, inputs: Sequence[Path]) -> CoverageReport:
        """Replay ``inputs`` through the gcov binary; inputs that kill the
        process are skipped and the replay resumes after them."""
        cov_dir = cov_bin.parent
        for stale in cov_dir.glob("*.gcda"):
            stale.unlink()
        i = 0
        chunk = 256
        while i < len(inputs):
            batch = [str(p) for p in inputs[i:i + chunk]]
            try:
                p = subprocess.run([str(cov_bin), *batch], cwd=cov_dir, capture_output=True,
                                   timeout=self.replay_timeout)
                done = p.returncode == 0
                stdout = p.stdout
            except subprocess.TimeoutExpired as exc:
                done = False
                stdout = exc.stdout or b""
            if done:
                i += len(batch)
                continue
            started = [int(x) for x in stdout.split()]
            i += max(started, default=1)  # skip the input that was running
        gcda = sorted(str(p.name) for p in cov_dir.glob("*.gcda"))
        if not gcda:
            return CoverageReport(frozenset(), "gcov")
        p = subprocess.run([self.gcov, "--json-format", "--stdout", "-b", *gcda], cwd=cov_dir,
                           capture_output=True, timeout=self.replay_timeout)
        docs = []
        text = p.stdout.decode(errors="replace")
        dec = json.JSONDecoder()
        pos = 0
        while pos < len(text):
            while pos < len(text) and text[pos].isspace():
                pos += 1
            if pos >= len(text):
                break
            doc, pos = dec.raw_decode(text, pos)
            docs.append(doc)
        rep = parse_gcov_json(docs, self.root)
        # keep library branches only; driver and harness code are not part of the target
        return CoverageReport(frozenset(b for b in rep.branches if not b.startswith("/")), "gcov")
