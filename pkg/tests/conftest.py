import numpy as np
import pytest

from driftforge.dataset import generate_dataset
from driftforge.normalization import compute_stats


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(count=40, t_tot=200, seed=7)


@pytest.fixture(scope="session")
def default_dataset():
    return generate_dataset()


@pytest.fixture(scope="session")
def small_stats(small_dataset):
    return compute_stats(small_dataset)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one PASS/FAIL line per acceptance criterion, shown even under capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
