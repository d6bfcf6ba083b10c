import numpy as np
import pytest

from avoinv.grf_fft import GridSpec
from avoinv.model import (
    DEFAULT_NOISE,
    DepthConfig,
    PriorConfig,
    SyntheticForward,
    make_synthetic_problem,
)
from avoinv.mcmc import FiniteDifferenceJacobian, Posterior

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def standard_problem(nx=10, ny=10, seed=0):
    grid = GridSpec(nx, ny)
    return make_synthetic_problem(grid, DepthConfig(), PriorConfig(), DEFAULT_NOISE, np.random.default_rng(seed))


def standard_posterior(problem, flat=False):
    fwd = SyntheticForward()
    bases = problem.prior.build_bases()
    d = problem.depth.normalized()
    if flat:
        return Posterior(problem.prior, bases, d, jacobian=FiniteDifferenceJacobian(fwd))
    return Posterior(problem.prior, bases, d, problem.data, DEFAULT_NOISE, fwd, FiniteDifferenceJacobian(fwd))


@pytest.fixture(scope="session")
def small_problem():
    return standard_problem(6, 5, seed=3)
