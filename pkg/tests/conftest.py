import numpy as np
import pytest

from subtree.dataset import Dataset

# acceptance outcomes, printed at the end of the run
ACCEPTANCE_LINES = []


def record(line):
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def gbsg2():
    from subtree import load_gbsg2

    return load_gbsg2()


def small_dataset(rng, n=120, signal=0.0):
    """Two-arm data with one ordinal and one categorical predictor."""
    z = rng.integers(0, 2, n)
    x1 = rng.normal(size=n)
    x2 = rng.integers(0, 4, n)
    y = 1.0 + 0.5 * z + signal * z * (x1 > 0) + rng.normal(size=n)
    return Dataset.from_arrays(y, z, ordinal={"x1": x1}, categorical={"x2": x2},
                               treatment_levels=("0", "1"))
