import numpy as np
import pytest

from feddelavg.ml_core import Dataset, FederatedProblem, get_loss

ACCEPTANCE_LINES = []


def record_acceptance(line: str):
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_classification(n, m=4, s=3, seed=0, shift=1.5):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, s, n)
    X = rng.standard_normal((n, m))
    X[np.arange(n), y % m] += shift
    return Dataset(X, y, s)


def make_regression(n, m=4, seed=0, offset=0.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, m))
    return Dataset(X, X @ np.linspace(-1, 1, m) + 0.3 * rng.standard_normal(n) + offset)


def make_problem(kind, N=3, n=25, seed=0):
    if kind == "cross_entropy":
        parts = [make_classification(n, seed=seed + i, shift=1.0 + 0.5 * i) for i in range(N)]
    else:
        parts = [make_regression(n, seed=seed + i, offset=0.5 * i) for i in range(N)]
    return FederatedProblem(get_loss(kind), tuple(parts))


@pytest.fixture
def ce_problem():
    return make_problem("cross_entropy")


@pytest.fixture
def ls_problem():
    return make_problem("squared_error")
