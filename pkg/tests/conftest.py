import numpy as np
import pytest
from scipy.stats import unitary_group

from qbrach.liealg import build_split, nearest_unitary, to_special_unitary
from qbrach.pipeline import load_problem


@pytest.fixture(scope="session")
def split():
    return build_split(None, "two_qubit_heisenberg")


@pytest.fixture(scope="session")
def split_su2():
    return build_split(None, "single_qubit_xy")


@pytest.fixture(scope="session")
def example1():
    return load_problem("example1")


@pytest.fixture(scope="session")
def cnot():
    return load_problem("cnot")


def random_su(n, seed):
    u = unitary_group.rvs(n, random_state=seed)
    return to_special_unitary(nearest_unitary(u))[0]


def random_coeffs(dim, seed, scale=1.0):
    return np.random.default_rng(seed).normal(size=dim) * scale


# (criterion, label, ok, detail) rows recorded by the acceptance suite
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, label, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [{crit}] {label}: {detail}")
