import sys

import numpy as np
import pytest

from fedforge.datasets import generate_synthetic
from fedforge.model import ModelSpec, init_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_data():
    return generate_synthetic(10, 40, (16, 16, 1), seed=7, test_per_class=10)


@pytest.fixture
def small_mlp(rng):
    return init_model(ModelSpec("mlp", (8, 8, 1), 4, hidden=6), rng)


@pytest.fixture
def small_cnn(rng):
    return init_model(ModelSpec("cnn", (6, 6, 2), 3, hidden=4), rng)


def central_difference(f, x, idx, h=1e-5):
    """Central finite difference of scalar f at flat index ``idx`` of array x."""
    old = x.flat[idx]
    x.flat[idx] = old + h
    up = f()
    x.flat[idx] = old - h
    down = f()
    x.flat[idx] = old
    return (up - down) / (2 * h)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdicts, one line per criterion, at the end of the run."""
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
