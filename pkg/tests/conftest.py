import numpy as np
import pytest

from ellreach import oracle
from ellreach.ltv import builtin_parametric_oscillator
from ellreach.reach import RunConfig, run_over, run_under

OSC_BOX = [[-2.0, 2.0], [-2.0, 2.0]]
CHECK_TIMES = (0.0, 0.5, 1.0)

_CRITERIA_LINES = []


def record_criterion(line: str):
    """Remember an acceptance line so it is repeated in the terminal summary."""
    _CRITERIA_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def oscillator():
    return builtin_parametric_oscillator()


@pytest.fixture(scope="session")
def under_family(oscillator):
    return run_under(oscillator, RunConfig(n_q=21, dt=0.01))


@pytest.fixture(scope="session")
def over_family(oscillator):
    return run_over(oscillator, RunConfig(n_q=5, dt=0.01))


@pytest.fixture(scope="session")
def pmp_polygons(oscillator):
    return oracle.pmp_boundary_polygons(oscillator, CHECK_TIMES, n_dirs=512, dt=0.01)


@pytest.fixture(scope="session")
def pmp_polygons_1024(oscillator):
    return oracle.pmp_boundary_polygons(oscillator, CHECK_TIMES, n_dirs=1024, dt=0.01)


@pytest.fixture(scope="session")
def grid_solution(oscillator):
    return oracle.grid_hjb_solve(oscillator, OSC_BOX, resolution=251, cfl=0.5, times=CHECK_TIMES)
