import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from massive.ingest import moments_from_rows  # noqa: E402
from massive.posterior import PosteriorProblem, empirical_hyperparams  # noqa: E402
from massive.simulate import SimConfig, simulate_dataset  # noqa: E402

# (criterion number, name, passed, detail) collected by the acceptance suite
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d} {name}: {detail}")


def make_data(n=1000, j=3, k=1, beta=0.3, sigma=1.0, seed=0, intercept=False):
    rows, truth = simulate_dataset(SimConfig(n=n, j=j, k=k, beta=beta, sigma=sigma, seed=seed))
    return rows, truth, moments_from_rows(rows, intercept=intercept)


@pytest.fixture(scope="session")
def small_data():
    """J = 3, n = 1000, one invalid instrument."""
    return make_data()


@pytest.fixture(scope="session")
def small_problem(small_data):
    _, _, stats = small_data
    return PosteriorProblem(stats, empirical_hyperparams(stats))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
