import sys

import numpy as np
import pytest

from shiftsim.topology import ModelConfig


@pytest.fixture
def tiny_mc() -> ModelConfig:
    """4 query heads over 2 KV heads; supports p in {1, 2, 4}."""
    return ModelConfig(layers=2, hidden=8, mlp_hidden=16, q_heads=4,
                       kv_heads=2, head_dim=2, vocab=32, max_ctx=64)


@pytest.fixture
def gqa_mc() -> ModelConfig:
    """8 query heads over 2 KV heads; supports p up to 8."""
    return ModelConfig(layers=2, hidden=16, mlp_hidden=32, q_heads=8,
                       kv_heads=2, head_dim=2, vocab=32, max_ctx=64)


@pytest.fixture
def mha6_mc() -> ModelConfig:
    """6 heads, no grouping; the p=6 deployment from the worked examples."""
    return ModelConfig(layers=2, hidden=12, mlp_hidden=24, q_heads=6,
                       kv_heads=6, head_dim=2, vocab=32, max_ctx=64)


@pytest.fixture
def mha8_mc() -> ModelConfig:
    """8 independent heads; the plain all-to-all path at any sp <= 8."""
    return ModelConfig(layers=2, hidden=16, mlp_hidden=32, q_heads=8,
                       kv_heads=8, head_dim=2, vocab=32, max_ctx=64)


def rand_f32(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(rows, cols)).astype(np.float32)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance pass/fail lines after the usual test summary."""
    for name in ("test_acceptance", "tests.test_acceptance"):
        mod = sys.modules.get(name)
        if mod is not None and getattr(mod, "RESULTS", None):
            terminalreporter.section("acceptance criteria")
            for line in mod.RESULTS:
                terminalreporter.write_line(line)
            break
