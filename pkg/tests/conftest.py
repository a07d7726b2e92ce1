from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from masfuzz.metainfo import scan_library

FIXTURES = Path(__file__).parent / "fixtures"
LIBS = ("minimath", "miniplist", "minicjson", "minixlsx", "minicares")


def have_toolchain() -> bool:
    return all(shutil.which(t) for t in ("clang", "gcc", "gcov"))


@pytest.fixture(scope="session")
def models():
    return {name: scan_library(FIXTURES / name) for name in LIBS}


@pytest.fixture
def plist(models):
    return models["miniplist"]


def write_config(tmp_path: Path, lib: str, **extra) -> Path:
    import yaml

    doc = {"library": {"root": str(FIXTURES / lib)}, "workdir": str(tmp_path / "work"), "rng_seed": 0}
    for k, v in extra.items():
        doc[k] = v
    tmp_path.mkdir(parents=True, exist_ok=True)
    p = tmp_path / "campaign.yaml"
    p.write_text(yaml.safe_dump(doc))
    return p


def mined_pool(model, seed: int = 0):
    """UE + MP + SEM pool with the stub oracle, as the mine stage builds it."""
    from masfuzz.oracles import StubOracle
    from masfuzz.semantics import mine_semantic_sequences
    from masfuzz.sequences import (MinerConfig, SequencePool, build_compat_graph,
                                   mine_mp_sequences, mine_usage_sequences)

    cfg = MinerConfig(rng_seed=seed)
    sem, _, _ = mine_semantic_sequences(model, StubOracle(), cfg)
    mp = mine_mp_sequences(build_compat_graph(model), cfg)
    return SequencePool([*mine_usage_sequences(model), *mp, *sem])


# -- acceptance reporting: one PASS/FAIL line per criterion ------------------------

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


class _Criterion:
    def __init__(self, config, number, title):
        self.config, self.number, self.title = config, number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and issubclass(exc_type, pytest.skip.Exception):
            verdict = "SKIP"
        else:
            verdict = "PASS" if exc_type is None else "FAIL"
        extra = "; ".join(self.details)
        if exc_type is not None and verdict == "FAIL":
            extra = (extra + "; " if extra else "") + f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"[{verdict}] {self.number}: {self.title}" + (f" ({extra})" if extra else "")
        self.config.stash[_ACCEPTANCE].append(line)
        print(line)
        return False


@pytest.fixture
def criterion(request):
    return lambda number, title: _Criterion(request.config, number, title)
