import os
import time
from pathlib import Path

import pytest
import torch

from desktts.config import ExperimentConfig

torch.set_num_threads(1)

# wall-clock seconds spent building (or loading) the trained toy models this session
BUILD_SECONDS: dict[str, float] = {}


@pytest.fixture(scope="session")
def cfg():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    # point DESKTTS_TEST_CACHE at a directory to reuse trained toy checkpoints between runs
    d = os.environ.get("DESKTTS_TEST_CACHE")
    return Path(d) if d else tmp_path_factory.mktemp("toy_checkpoints")


@pytest.fixture(scope="session")
def codec25(cfg, cache_dir):
    from desktts import recipes

    t0 = time.perf_counter()
    m = recipes.build_codec(cfg, 25, cache_dir)
    BUILD_SECONDS["codec25"] = time.perf_counter() - t0
    return m


@pytest.fixture(scope="session")
def codec50(cfg, cache_dir):
    from desktts import recipes

    return recipes.build_codec(cfg, 50, cache_dir)


@pytest.fixture(scope="session")
def codec_corpus(cfg):
    from desktts import recipes

    return recipes.codec_corpus(cfg)


@pytest.fixture(scope="session")
def t2s_models25(cfg, cache_dir, codec25):
    """The three strategies plus the no-language ablation, trained identically at 25 Hz."""
    from desktts import recipes

    t0 = time.perf_counter()
    models = {s: recipes.build_t2s(cfg, s, 25, codec25, cache_dir=cache_dir) for s in cfg.t2s.strategies}
    models["token_concat/no_lang"] = recipes.build_t2s(cfg, "token_concat", 25, codec25, fusion="none", cache_dir=cache_dir)
    BUILD_SECONDS["t2s25"] = time.perf_counter() - t0
    return models


@pytest.fixture(scope="session")
def t2s_models50(cfg, cache_dir, codec50):
    from desktts import recipes

    return {s: recipes.build_t2s(cfg, s, 50, codec50, cache_dir=cache_dir) for s in cfg.t2s.strategies}


@pytest.fixture(scope="session")
def s2m_models(cfg, cache_dir, codec25, codec50):
    """The shipped-default S2M backbone at both token rates."""
    from desktts import recipes

    return {25: recipes.build_s2m(cfg, 25, codec25, cache_dir=cache_dir), 50: recipes.build_s2m(cfg, 50, codec50, cache_dir=cache_dir)}


@pytest.fixture(scope="session")
def oracle25(cfg, codec25):
    from desktts import recipes

    return recipes.build_oracle(cfg, codec25)


# acceptance reporting ------------------------------------------------------------

ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def check(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'} {name}: {detail}"
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
