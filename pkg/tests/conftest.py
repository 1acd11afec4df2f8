import numpy as np
import pytest

from weakkam import LaxOleinikConfig, PeriodicGrid, alpha_sweep, mechanical, solve_weak_kam
from weakkam.mather import omega_range

PENDULUM = "cos(2*pi*x)"

# acceptance results collected by tests/test_acceptance.py: number -> (passed, text)
ACCEPTANCE_LINES: dict = {}


@pytest.fixture(scope="session")
def pendulum():
    return mechanical(PENDULUM)


@pytest.fixture(scope="session")
def grid256():
    return PeriodicGrid(1, 256)


@pytest.fixture(scope="session")
def pendulum_solution(pendulum, grid256):
    """Endpoint quadrature at the reference resolution n=256, tau=0.02."""
    return solve_weak_kam(pendulum, grid256, LaxOleinikConfig(tau=0.02))


@pytest.fixture(scope="session")
def pendulum_midpoint(pendulum, grid256):
    """Midpoint quadrature with sub-cell refinement: the consistent variant for derivative checks."""
    return solve_weak_kam(pendulum, grid256, LaxOleinikConfig(tau=0.02, quadrature="midpoint", refine=True))


@pytest.fixture(scope="session")
def alpha41(pendulum, grid256):
    """Pendulum alpha on omega = -2, -1.9, ..., 2."""
    return alpha_sweep(pendulum, omega_range(-2.0, 2.0, 0.1), grid256, LaxOleinikConfig(tau=0.02))


@pytest.fixture(scope="session")
def alpha_wide(pendulum, grid256):
    """Pendulum alpha on omega = -6, -5.5, ..., 6."""
    return alpha_sweep(pendulum, omega_range(-6.0, 6.0, 0.5), grid256, LaxOleinikConfig(tau=0.02))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        passed, text = ACCEPTANCE_LINES[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {text}")
