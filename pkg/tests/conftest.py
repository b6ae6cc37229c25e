import sys

import numpy as np
import pytest

from longattn.model import ModelConfig, init_model


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=32, d_model=16, n_heads=4, n_layers=2, d_ff=32,
                       max_positions=128, seed=3)


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize(model, std=0.3, seed=0):
    """Larger weights so attention patterns actually differ between heads/tokens."""
    r = np.random.default_rng(seed)
    for name, p in model.params.items():
        if not name.endswith("norm"):
            p.data = r.normal(0.0, std, size=p.shape)
    return model


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
