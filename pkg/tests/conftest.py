"""Session fixtures: trained victims shared across test modules.

The bundles returned here are session-wide singletons. Tests that mutate a
bundle (attacks, flips) must work on ``bundle.copy()``.
"""

from __future__ import annotations

import pytest

from sneakyflip.bitcodec import BF16, FP32
from sneakyflip.bundle import quantize_int8
from sneakyflip.nnet import arch_input_dim, build_arch, make_task, train_toy

_notes: list[str] = []


@pytest.fixture
def note():
    """Collector for measured magnitudes worth surfacing in the run summary."""

    def add(line: str) -> None:
        _notes.append(line)

    return add


def pytest_terminal_summary(terminalreporter):
    if _notes:
        terminalreporter.section("reported magnitudes")
        for line in _notes:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy4():
    return make_task("toy4", arch_input_dim(build_arch("mlp")))


@pytest.fixture(scope="session")
def toy2():
    return make_task("toy2", arch_input_dim(build_arch("mlp")))


@pytest.fixture(scope="session")
def mlp_victims(toy4):
    """Three independently trained BF16 victims keyed by training seed."""
    return {seed: train_toy("mlp", toy4, seed, BF16) for seed in (1, 2, 3)}


@pytest.fixture(scope="session")
def mlp_bf16(mlp_victims):
    return mlp_victims[1][0]


@pytest.fixture(scope="session")
def mlp_fp32(toy4):
    bundle, _ = train_toy("mlp", toy4, 1, FP32)
    return bundle


@pytest.fixture(scope="session")
def mlp_int8(mlp_bf16):
    return quantize_int8(mlp_bf16)


@pytest.fixture(scope="session")
def attn_trained():
    task = make_task("toy4", arch_input_dim(build_arch("attn")))
    bundle, info = train_toy("attn", task, 1, BF16)
    return task, bundle, info
