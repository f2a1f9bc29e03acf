import numpy as np
import pytest

from repkit.net import ModelConfig, init_params
from repkit.signal import SignalStream
from repkit.synthgen import GenConfig, generate_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_stream(rng, length=500, peaks=((40, 60), (200, 240)), ex="ex", subj="s"):
    return SignalStream(rng.normal(size=(length, 9)), list(peaks), 92.0, ex, subj)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(4, 2, GenConfig(seed=3, sets=2))


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(conv_blocks=((8, 5), (16, 3)), gru_hidden=12, fc_dims=(16, 8))


@pytest.fixture
def tiny_model(tiny_config):
    return init_params(tiny_config, seed=5, head=False)


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
