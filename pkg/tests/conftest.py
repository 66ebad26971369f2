import numpy as np
import pytest

from schwarz_ct.ltv_model import schorlepp_linearized
from schwarz_ct.ode_engine import TimeGrid
from schwarz_ct.reference_solver import solve_full_direct, solve_full_riccati

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def benchmark_problem():
    return schorlepp_linearized()


@pytest.fixture(scope="session")
def benchmark_grid(benchmark_problem):
    return TimeGrid.uniform(0.0, benchmark_problem.T, 1e-3)


@pytest.fixture(scope="session")
def riccati_reference(benchmark_problem, benchmark_grid):
    return solve_full_riccati(benchmark_problem, benchmark_grid)


@pytest.fixture(scope="session")
def direct_reference(benchmark_problem, benchmark_grid):
    return solve_full_direct(benchmark_problem, benchmark_grid)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
