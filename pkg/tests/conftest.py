import numpy as np
import pytest

from rosa.model import ModelConfig, synth_model, synth_tokens

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(hidden=32, layers=2, heads=4, kv_groups=2, vocab=64, seed=7)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return synth_model(tiny_config)


@pytest.fixture(scope="session")
def tiny_calib(tiny_config):
    return synth_tokens(6, 24, tiny_config.vocab, seed=101)


@pytest.fixture(scope="session")
def tiny_eval(tiny_config):
    return synth_tokens(3, 24, tiny_config.vocab, seed=202, exponent=1.3, shuffle_seed=9)
