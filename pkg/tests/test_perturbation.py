import numpy as np
import pytest
from conftest import make_params, zero_params
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_bvp, solve_ivp

from equinash.market import simulate_signal_and_price
from equinash.model import TimeGrid
from equinash.perturbation import (OrderCoefficients, RiccatiFn, assemble_series,
                                   order0_coefficients, orderm_coefficients, perturbation_series,
                                   remainder_scaling_study, riccati_f)
from equinash.picard import solve_fixed_point


def five_point(f, t, d=1e-3):
    return (-f(t + 2 * d) + 8 * f(t + d) - 8 * f(t - d) + f(t - 2 * d)) / (12 * d)


def test_riccati_examples():
    assert riccati_f(1.0, 0.0, 0.0, 1.0) == 0.0
    assert riccati_f(0.0, 1.0, 0.0, 1.0) == pytest.approx(-0.5, rel=1e-15)
    for c, k in [(0.0, 0.0), (1.0, 0.0), (2.5, 0.3), (0.0, 4.0)]:
        assert riccati_f(1.0, c, k, 1.0) == pytest.approx(-c, abs=1e-14)


def test_riccati_against_numerical_ode():
    sol = solve_ivp(lambda t, f: -f**2 + 1.0, (1.0, 0.0), [0.0], rtol=1e-12, atol=1e-14)
    assert riccati_f(0.0, 0.0, 1.0, 1.0) == pytest.approx(sol.y[0, -1], abs=1e-9)
    assert riccati_f(0.0, 0.0, 1.0, 1.0) == pytest.approx(-np.tanh(1.0), abs=1e-12)


def test_riccati_rejects_negative_inputs():
    with pytest.raises(ValueError):
        riccati_f(0.0, -1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        riccati_f(0.0, 0.0, -1.0, 1.0)


@settings(max_examples=60)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0.1, 3.0))
def test_riccati_residual_and_sign(c, k, T):
    f = RiccatiFn(c, k, T)
    t = np.linspace(0, T, 41)[1:-1]
    t = t[(t > 3e-3) & (t < T - 3e-3)]
    assert np.abs(five_point(f, t) + f(t) ** 2 - k).max() <= 1e-6
    assert f(T) == pytest.approx(-c, abs=1e-12)
    assert np.all(f(np.linspace(0, T, 50)) <= 1e-15)


@settings(max_examples=40)
@given(st.floats(0, 5), st.floats(0, 5))
def test_riccati_complex_step_residual(c, k):
    t = np.linspace(0.05, 0.95, 19)
    h = 1e-20
    deriv = riccati_f(t + 1j * h, c, k, 1.0).imag / h
    f = riccati_f(t, c, k, 1.0).real
    assert np.abs(deriv + f**2 - k).max() <= 1e-10


@given(st.floats(0.01, 5), st.floats(0.0, 1.0))
def test_riccati_branch_continuity(c, s):
    t = s * 2.0
    assert riccati_f(t, c, 1e-14, 2.0) == pytest.approx(riccati_f(t, c, 0.0, 2.0), abs=1e-6)


@pytest.fixture(scope="module")
def zero_ensemble():
    P = zero_params()
    return simulate_signal_and_price(P, TimeGrid(P.T, 20), 300, seed=0)


@pytest.mark.parametrize("method", ["explicit", "recursive"])
def test_zero_problem_has_zero_series(zero_ensemble, method):
    series = perturbation_series(zero_ensemble, 2, method)
    for c in series.orders:
        for x in (c.eta, c.nu, c.Q_I, c.Q_B):
            assert np.abs(x.coef).max() == 0


def test_no_penalty_no_signal_means_hold():
    P = make_params(psi=0.0, rI=0.0, q_I0=2.0, signal=dict(kappa=1.0))
    ens = simulate_signal_and_price(P, TimeGrid(P.T, 20), 300, seed=0)
    o = order0_coefficients(None, ens)
    assert np.abs(o.eta.coef).max() == 0
    np.testing.assert_allclose(o.Q_I.coef[0], 2.0)


def test_zero_previous_orders_give_zero(small_ensemble):
    z = small_ensemble.market.zeros()
    o = orderm_coefficients(None, small_ensemble, [OrderCoefficients(z, z, z, z)])
    assert all(np.abs(x.coef).max() == 0 for x in (o.eta, o.nu, o.Q_I, o.Q_B))
    with pytest.raises(ValueError):
        orderm_coefficients(None, small_ensemble, [])


def deterministic_oracle(P, T):
    """Continuous-time orders 0 and 1 for a deterministic signal as a boundary-value problem."""
    a, b, p = P.a[0, 0], P.b[0, 0], P.p[0, 0]
    phi, psi, rB, rI = P.phi[0, 0], P.psi[0, 0], P.rB[0, 0], P.rI[0, 0]
    qB, qI, y = P.q_B0[0], P.q_I0[0], P.y0[0]
    mu, kappa = P.signal.alpha0_mean[0], P.signal.kappa[0, 0]

    def rhs(t, s):
        QI0, eta0, X, nu0, Yt, QI1, eta1 = s
        drift = mu * np.exp(-kappa * t) - p * np.exp(-p * t) * y
        QB0 = qB + X - (QI0 - qI)
        return np.vstack([eta0, -(drift - 2 * rI * QI0) / (2 * b),
                          nu0, -(drift - 2 * rB * QB0) / (2 * a),
                          -p * Yt + nu0,
                          eta1, -(nu0 - p * Yt - 2 * rI * QI1) / (2 * b)])

    def bc(s0, sT):
        QB0_T = qB + sT[2] - (sT[0] - qI)
        return np.array([s0[0] - qI, sT[1] + psi / b * sT[0], s0[2], sT[3] + phi / a * QB0_T,
                         s0[4], s0[5], sT[6] + psi / b * sT[5]])

    t = np.linspace(0, T, 400)
    sol = solve_bvp(rhs, bc, t, np.zeros((7, t.size)), tol=1e-10, max_nodes=100_000)
    assert sol.success
    return sol.sol


@pytest.mark.parametrize("method", ["explicit", "recursive"])
def test_deterministic_signal_matches_bvp_oracle(method):
    P = make_params(y0=0.3, q_B0=-0.4,
                    signal=dict(kappa=1.0, alpha0_mean=0.8, sigma_alpha=0.0, alpha0_var=0.0))
    oracle = deterministic_oracle(P, P.T)
    errs = []
    for n in (50, 100):
        g = TimeGrid(P.T, n)
        ens = simulate_signal_and_price(P, g, 2, seed=0)
        series = perturbation_series(ens, 1, method)
        ref = oracle(g.times)
        got = [series.orders[0].eta, series.orders[0].nu, series.orders[1].eta]
        errs.append(max(np.abs(ens.values(x)[0, :, 0] - ref[i]).max()
                        for x, i in zip(got, (1, 3, 6))))
    assert errs[1] <= 2 * g.dt
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.2)


def test_higher_orders_start_flat_and_respect_information(small_ensemble):
    m = small_ensemble.market
    series = perturbation_series(small_ensemble, 2, "explicit")
    for k, c in enumerate(series.orders):
        assert m.is_F_adapted(c.eta) and m.is_G_adapted(c.nu)
        if k:
            assert np.abs(c.Q_I.coef[:, 0]).max() == 0
            assert np.abs(c.Q_B.coef[:, 0]).max() == 0


def test_explicit_and_recursive_routes_agree_to_first_order(small_ensemble):
    ens = small_ensemble
    ex = perturbation_series(ens, 1, "explicit")
    rc = perturbation_series(ens, 1, "recursive")
    for m in range(2):
        for name in ("eta", "nu"):
            gap = np.sqrt(ens.mc_norm_sq(getattr(ex.orders[m], name) - getattr(rc.orders[m], name)))
            scale = np.sqrt(ens.mc_norm_sq(getattr(rc.orders[m], name)))
            assert gap <= 2 * ens.grid.dt * max(scale, 1.0)


def test_assemble_series_algebra(small_ensemble):
    ens = small_ensemble
    series = perturbation_series(ens, 1)
    zero_h = assemble_series(series, 0.0)
    assert zero_h.nu.allclose(series.orders[0].nu, atol=0)
    h = 0.03
    s0, s1 = assemble_series(series, h, 0), assemble_series(series, h, 1)
    assert (s1.nu - s0.nu).allclose(series.orders[1].nu * h, atol=1e-15)
    assert (s1.eta - s0.eta).allclose(series.orders[1].eta * h, atol=1e-15)
    with pytest.raises(ValueError):
        assemble_series(series, -0.1)
    with pytest.raises(ValueError):
        assemble_series(series, 0.1, 3)


def test_more_orders_track_picard_better(small_ensemble):
    ens = small_ensemble
    series = perturbation_series(ens, 2, "recursive")
    h = 0.2
    bundle, _ = solve_fixed_point(ens.with_params(ens.params.with_updates(h=h)), tol=1e-12)
    gaps = [np.sqrt(ens.mc_norm_sq(bundle.nu - assemble_series(series, h, M).nu)) for M in range(3)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_remainder_vanishes_at_zero_impact(small_ensemble):
    ens = small_ensemble.with_params(small_ensemble.params.with_updates(h=0.0))
    series = perturbation_series(ens, 0, "recursive")
    bundle, _ = solve_fixed_point(ens, tol=1e-13)
    pair = assemble_series(series, 0.0)
    assert np.sqrt(ens.mc_norm_sq(bundle.nu - pair.nu)) < 1e-11
    assert np.sqrt(ens.mc_norm_sq(bundle.eta - pair.eta)) < 1e-11


def test_first_order_remainder_ratio_decreases(small_ensemble):
    h_ref = 0.8
    rep = remainder_scaling_study(None, small_ensemble, 1, [h_ref * f for f in (0.4, 0.2, 0.1, 0.05)])
    assert rep.passed and not rep.dropped
    assert all(b < a for a, b in zip(rep.ratio_nu, rep.ratio_nu[1:]))
    assert rep.slope_nu >= 1.5 and rep.slope_eta >= 1.5


def test_multi_asset_is_rejected():
    P = make_params(K=2, D=2, sigma=0.5)
    ens = simulate_signal_and_price(P, TimeGrid(P.T, 5), 100, seed=0)
    with pytest.raises(ValueError, match="K = D = 1"):
        order0_coefficients(None, ens)
