import numpy as np
import pytest

from scvae import nn_core as nn
from scvae.model import NetworkConfig, SkipSpec, build_network


def finite_difference(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


@pytest.fixture
def tiny_config():
    return NetworkConfig(
        encoder_depth=3,
        decoder_depth=3,
        hidden_width=6,
        latent_dim=2,
        input_dim=5,
        encoder_skip=SkipSpec("every_layer"),
        decoder_skip=SkipSpec("none"),
    )


@pytest.fixture
def tiny_net(tiny_config):
    return build_network(tiny_config, seed=3)


@pytest.fixture
def pixels():
    rng = np.random.default_rng(0)
    return rng.uniform(0, 1, size=(40, 5))


@pytest.fixture(autouse=True)
def _grad_mode_restored():
    yield
    assert nn._grad_enabled


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
