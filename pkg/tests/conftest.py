import numpy as np
import pytest

from flmip import ReluNetwork

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_network(rng, dims):
    layers = []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        layers.append((rng.normal(size=(n_out, n_in)),
                       rng.normal(size=n_out) * 0.3))
    return ReluNetwork(layers)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def abs_net():
    # |x| = relu(x) + relu(-x), exact
    return ReluNetwork([(np.array([[1.0], [-1.0]]), np.zeros(2)),
                        (np.array([[1.0, 1.0]]), np.zeros(1))])


@pytest.fixture
def identity_net():
    # single affine layer y = x
    return ReluNetwork([(np.array([[1.0]]), np.zeros(1))])
