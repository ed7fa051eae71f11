import numpy as np
import pytest

from rcp.data import Dataset
from rcp.dgp import SyntheticSpec, gen_synthetic
from rcp.forest import ForestParams

FAST_FOREST = ForestParams(n_trees=25, min_leaf="auto", seed=3)


@pytest.fixture(scope="session")
def small_sample():
    return gen_synthetic(SyntheticSpec.from_seed(400, 1, 0.6, seed=11))


@pytest.fixture(scope="session")
def small_ds(small_sample):
    return small_sample.dataset


@pytest.fixture
def toy_ds():
    x = np.arange(10, dtype=float)[:, None]
    t = np.array([0, 1] * 5)
    return Dataset(x, t, x.ravel() * 2.0)


def pytest_configure(config):
    config._criteria = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; it is echoed now and again in the terminal summary."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config._criteria.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
