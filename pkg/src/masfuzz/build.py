"""Toolchain builds of generated drivers.

Each driver gets two binaries: a libFuzzer binary with sanitizers (clang)
and a gcov-instrumented replay binary (gcc) used to measure the branch
coverage reached by the evolved corpus.
"""

from __future__ import annotations

import logging
import shlex
import shutil
import subprocess
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .metainfo import LibraryModel
from .synthesis import CompileResult, FuzzDriver

log = logging.getLogger(__name__)

SANITIZERS = {"address": "address", "memory": "memory", "undefined": "undefined"}


def find_symbolizer() -> tuple[str, str] | None:
    """(env key, path) for the best available stack symbolizer."""
    for name in ("llvm-symbolizer", "llvm-symbolizer-14", "llvm-symbolizer-15", "addr2line"):
        p = shutil.which(name)
        if p:
            return "external_symbolizer_path", p
    return None


@dataclass
class ToolchainCompiler:
    model: LibraryModel
    build_dir: str
    cc: str = "clang"
    sanitizer: str = "address"
    cflags: list[str] = field(default_factory=lambda: ["-g", "-gdwarf-4", "-O1", "-fno-omit-frame-pointer"])
    ldflags: list[str] = field(default_factory=list)
    coverage_cc: str | None = "gcc"
    extra_sources: list[str] = field(default_factory=list)
    timeout: float = 300.0

    @classmethod
    def from_config(cls, model: LibraryModel, build_dir: str, cfg: Mapping[str, Any] | None) -> "ToolchainCompiler":
        cfg = dict(cfg or {})
        for key in ("cflags", "ldflags", "extra_sources"):
            if isinstance(cfg.get(key), str):
                cfg[key] = shlex.split(cfg[key])
        return cls(model=model, build_dir=build_dir, **cfg)

    def __post_init__(self) -> None:
        if self.sanitizer not in SANITIZERS:
            raise ValueError(f"unsupported sanitizer {self.sanitizer!r}; choose one of {sorted(SANITIZERS)}")

    @property
    def include_flags(self) -> list[str]:
        root = Path(self.model.root)
        dirs = dict.fromkeys(str((root / h).parent) for h in self.model.headers)
        return [f"-I{d}" for d in dirs]

    @property
    def library_sources(self) -> list[str]:
        root = Path(self.model.root)
        return [str(root / f) for f in self.model.library_files] + list(self.extra_sources)

    def driver_dir(self, driver_id: str) -> Path:
        return Path(self.build_dir) / driver_id

    def binary(self, driver_id: str) -> Path:
        return self.driver_dir(driver_id) / "fuzz"

    def coverage_binary(self, driver_id: str) -> Path:
        return self.driver_dir(driver_id) / "cov" / "replay"

    def _run(self, cmd: list[str], cwd: Path) -> tuple[bool, str]:
        log.debug("build: %s", shlex.join(cmd))
        try:
            p = subprocess.run(cmd, cwd=cwd, capture_output=True, text=True, timeout=self.timeout)
        except FileNotFoundError as exc:
            return False, f"compiler not found: {exc}"
        except subprocess.TimeoutExpired:
            return False, f"build timed out after {self.timeout}s"
        return p.returncode == 0, (p.stdout + p.stderr).strip()

    def compile(self, driver: FuzzDriver) -> CompileResult:
        d = self.driver_dir(driver.id)
        cov = d / "cov"
        cov.mkdir(parents=True, exist_ok=True)
        src = d / driver.filename
        src.write_text(driver.source)
        cmd = [
            self.cc, *self.cflags, f"-fsanitize=fuzzer,{SANITIZERS[self.sanitizer]}",
            *self.include_flags, str(src), *self.library_sources, *self.ldflags, "-o", str(self.binary(driver.id)),
        ]
        ok, out = self._run(cmd, d)
        if not ok:
            return CompileResult(False, out)
        cov_bin = None
        if self.coverage_cc:
            for stale in cov.glob("*.gc*"):
                stale.unlink()
            main = cov / "replay_main.c"
            main.write_text(resources.files("masfuzz").joinpath("templates/replay_main.c").read_text())
            cmd = [
                self.coverage_cc, "--coverage", "-O0", "-g", *self.include_flags,
                str(src), str(main), *self.library_sources, *self.ldflags, "-o", str(self.coverage_binary(driver.id)),
            ]
            ok, out2 = self._run(cmd, cov)
            if not ok:
                return CompileResult(False, out2)
            cov_bin = str(self.coverage_binary(driver.id))
        return CompileResult(True, out, str(self.binary(driver.id)), cov_bin)
