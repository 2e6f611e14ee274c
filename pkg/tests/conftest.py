import json

import numpy as np
import pytest

from equinash.experiment import baseline_path, load_config
from equinash.market import simulate_signal_and_price
from equinash.model import ModelParams, TimeGrid
from equinash.picard import solve_fixed_point

ACCEPTANCE_LINES = []


def make_params(**overrides):
    base = dict(K=1, D=1, T=0.25, a=1.0, b=1.0, h=0.1, p=1.0, phi=0.5, psi=0.5, rB=0.1, rI=0.1,
                q_I0=1.0, sigma=0.5, z0=100.0,
                signal=dict(kappa=1.0, theta=0.0, sigma_alpha=0.5, alpha0_var=0.125))
    base.update(overrides)
    return ModelParams.build(**base)


def zero_params(**overrides):
    """No signal, no inventory, no impact memory: the equilibrium is identically zero."""
    base = dict(K=1, D=1, T=0.25, a=1.0, b=1.0, h=0.1, p=1.0, phi=0.5, psi=0.5, rB=0.1, rI=0.1,
                sigma=0.5, signal=dict(kappa=1.0))
    base.update(overrides)
    return ModelParams.build(**base)


@pytest.fixture(scope="session")
def baseline_config():
    return load_config(baseline_path())


@pytest.fixture(scope="session")
def baseline_doc():
    return json.loads(baseline_path().read_text())


@pytest.fixture(scope="session")
def small_ensemble():
    """2000 paths on a 40-step grid: cheap enough for unit tests."""
    P = make_params()
    return simulate_signal_and_price(P, TimeGrid(P.T, 40), 2000, seed=11)


@pytest.fixture(scope="session")
def small_equilibrium(small_ensemble):
    return solve_fixed_point(small_ensemble, tol=1e-10)


@pytest.fixture(scope="session")
def baseline_ensemble(baseline_config):
    c = baseline_config
    return simulate_signal_and_price(c.params, c.grid, c.n_paths, c.seed)


@pytest.fixture(scope="session")
def baseline_equilibrium(baseline_ensemble, baseline_config):
    return solve_fixed_point(baseline_ensemble, tol=baseline_config.solver.tol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
