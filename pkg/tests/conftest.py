import warnings

import numpy as np
import pytest
import torch

from segpatch.model import LinearSegModel, ToyNet, pretrained_toynet

warnings.filterwarnings("ignore", message="The given NumPy array is not writable")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy64():
    """Random-weight ToyNet in float64, for gradient checks."""
    return ToyNet(seed=0, dtype=torch.float64)


@pytest.fixture(scope="session")
def trained_toy():
    return pretrained_toynet(0)


@pytest.fixture
def linear_model():
    W = np.array([[1.0, -2.0, 0.5], [0.3, 0.0, -1.0], [-0.7, 1.5, 2.0]])
    b = np.array([0.1, -0.2, 0.05])
    return LinearSegModel(W, b)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
