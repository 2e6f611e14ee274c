import numpy as np
import pytest
from conftest import make_params, zero_params

from equinash.criteria import FiltrationError
from equinash.gaussian import AffineProcess
from equinash.market import propagate_transient_impact, simulate_signal_and_price
from equinash.model import TimeGrid
from equinash.picard import (StateBundle, apply_phi, contraction_probe, fbsde_consistency_check,
                             solve_fixed_point, solve_fixed_point_krylov)


@pytest.fixture(scope="module")
def zero_ensemble():
    P = zero_params()
    return simulate_signal_and_price(P, TimeGrid(P.T, 20), 500, seed=0)


def test_zero_problem_is_a_fixed_point(zero_ensemble):
    ens = zero_ensemble
    zero = StateBundle.zeros(ens.market)
    image = apply_phi(ens, zero)
    assert image.norm(ens) == 0
    bundle, trace = solve_fixed_point(ens)
    assert trace.converged and trace.iterations == 1
    assert bundle.norm(ens) == 0


def test_zero_equilibrium_has_zero_residuals(zero_ensemble):
    ens = zero_ensemble
    res = fbsde_consistency_check(ens, StateBundle.zeros(ens.market))
    assert all(v[0] == 0 for v in res.terminal.values())
    assert all(v[0] == 0 for v in res.drift.values())
    assert res.passed


def test_deterministic_map_matches_hand_quadrature():
    """h = p = 0 and a deterministic signal: both updates are plain sums."""
    mu, kappa, a, b, phi, psi, rB, rI, qB, qI = 0.8, 1.3, 1.2, 0.7, 0.4, 0.9, 0.3, 0.2, -0.5, 1.5
    P = make_params(h=0.0, p=0.0, a=a, b=b, phi=phi, psi=psi, rB=rB, rI=rI, q_B0=qB, q_I0=qI,
                    signal=dict(kappa=kappa, alpha0_mean=mu, sigma_alpha=0.0, alpha0_var=0.0))
    g = TimeGrid(P.T, 30)
    ens = simulate_signal_and_price(P, g, 3, seed=0)
    t, dt, N = g.times, g.dt, g.n_steps
    nu_in, eta_in = 0.3 * np.cos(t), 0.5 - t
    QB_in, QI_in = 0.2 + t**2, 1.0 - t
    m = ens.market
    bundle = StateBundle(m.deterministic(nu_in[:, None]), m.deterministic(eta_in[:, None]),
                         m.zeros(), m.deterministic(QB_in[:, None]), m.deterministic(QI_in[:, None]))
    out = apply_phi(ens, bundle)
    alpha = mu * np.exp(-kappa * t)
    QB_T = qB + sum((nu_in[k] - eta_in[k]) * dt for k in range(N))
    QI_T = qI + sum(eta_in[k] * dt for k in range(N))
    nu_hand = np.empty(N + 1)
    eta_hand = np.empty(N + 1)
    for j in range(N + 1):
        tail_B = sum((alpha[k] - 2 * rB * QB_in[k]) * dt for k in range(j, N))
        tail_I = sum((alpha[k] - 2 * rI * QI_in[k]) * dt for k in range(j, N))
        nu_hand[j] = (-2 * phi * QB_T + tail_B) / (2 * a)
        eta_hand[j] = (-2 * psi * QI_T + tail_I) / (2 * b)
    np.testing.assert_allclose(ens.values(out.nu)[0, :, 0], nu_hand, atol=1e-12)
    np.testing.assert_allclose(ens.values(out.eta)[0, :, 0], eta_hand, atol=1e-12)


def test_impact_component_is_the_propagator(small_ensemble):
    ens = small_ensemble
    nu = ens.market.deterministic(0.7)
    b = StateBundle(nu, *(ens.market.zeros() for _ in range(4)))
    Y = apply_phi(ens, b).Y
    expect = propagate_transient_impact(ens.params, ens.grid, np.full((1, ens.grid.n_steps + 1, 1), 0.7))
    np.testing.assert_allclose(ens.values(Y)[0], expect[0], atol=1e-14)


def test_tag_violation_is_rejected(small_ensemble):
    m = small_ensemble.market
    bad = StateBundle(m.alpha, m.zeros(), m.zeros(), m.zeros(), m.zeros())
    with pytest.raises(FiltrationError):
        apply_phi(small_ensemble, bad)


def test_geometric_convergence(small_ensemble, small_equilibrium):
    bundle, trace = small_equilibrium
    assert trace.converged and not trace.outside_guarantee
    C = trace.contraction_constant
    assert trace.fitted_ratio() <= np.sqrt(C) + 0.05
    assert trace.max_step_ratio() <= np.sqrt(C) + 0.05
    assert trace.final_residual <= 1e-9
    assert small_ensemble.market.is_G_adapted(bundle.nu)
    assert small_ensemble.market.is_F_adapted(bundle.eta)


def test_equilibrium_is_a_map_fixed_point_and_broker_measurable(small_ensemble, small_equilibrium):
    bundle, _ = small_equilibrium
    ens = small_ensemble
    assert (apply_phi(ens, bundle) - bundle).norm(ens) < 1e-9
    nu = bundle.nu
    projected = ens.market.cond_G(nu)
    rel = np.sqrt(ens.mc_norm_sq(projected - nu) / ens.mc_norm_sq(nu))
    assert rel < 1e-6


def test_relaxed_and_krylov_solvers_agree(small_ensemble, small_equilibrium):
    bundle, _ = small_equilibrium
    relaxed, tr = solve_fixed_point(small_ensemble, tol=1e-10, relaxation=0.7)
    assert tr.converged
    krylov, tk = solve_fixed_point_krylov(small_ensemble, tol=1e-10)
    assert tk.converged
    for other in (relaxed, krylov):
        assert (other - bundle).norm(small_ensemble) < 1e-8


def test_iteration_cap_returns_best_iterate_flagged(small_ensemble):
    with pytest.warns(RuntimeWarning, match="without reaching"):
        _, trace = solve_fixed_point(small_ensemble, tol=1e-30, max_iter=3)
    assert not trace.converged and trace.iterations == 3


def test_outside_guarantee_is_flagged():
    P = make_params(T=1.0)
    ens = simulate_signal_and_price(P, TimeGrid(1.0, 10), 200, seed=0)
    with pytest.warns(RuntimeWarning, match="not guaranteed"):
        _, trace = solve_fixed_point(ens, tol=1e-8, max_iter=300)
    assert trace.outside_guarantee


def test_contraction_probe_bound_and_degenerate_pair(small_ensemble):
    rep = contraction_probe(small_ensemble, n_pairs=20, seed=3)
    assert rep.passed and len(rep.ratios) == 20
    assert rep.max_ratio <= rep.contraction_constant + 0.05


def test_contraction_ratio_scales_with_T_squared():
    ratios = []
    for T in (0.25, 0.5):
        P = make_params(T=T)
        ens = simulate_signal_and_price(P, TimeGrid(T, 40), 1000, seed=1)
        ratios.append(contraction_probe(ens, n_pairs=10, seed=2).max_ratio)
    assert ratios[1] / ratios[0] == pytest.approx(4.0, rel=0.25)


def test_fbsde_residuals_at_equilibrium(small_ensemble, small_equilibrium):
    bundle, _ = small_equilibrium
    res = fbsde_consistency_check(small_ensemble, bundle)
    assert res.passed
    assert res.terminal["Z_T"][0] <= 1e-10
    assert all(np.isfinite(v[0]) for v in res.drift.values())


def test_fbsde_check_requires_a_fixed_point(small_ensemble):
    with pytest.raises(ValueError):
        fbsde_consistency_check(small_ensemble, StateBundle.zeros(small_ensemble.market))


def test_large_terminal_penalty_liquidates():
    values = []
    for psi in (0.5, 5.0, 50.0, 1000.0):
        P = make_params(psi=psi)
        ens = simulate_signal_and_price(P, TimeGrid(P.T, 40), 1000, seed=1)
        bundle, trace = solve_fixed_point_krylov(ens, tol=1e-8)
        assert trace.converged and trace.outside_guarantee == (psi > 1)
        assert fbsde_consistency_check(ens, bundle).passed
        values.append(np.sqrt((ens.values(bundle.Q_I)[:, -1] ** 2).mean()))
    assert np.all(np.diff(values) < 0)
    assert values[-1] < 0.01

