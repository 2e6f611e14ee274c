"""Expansion of the one-asset equilibrium in powers of the impact strength h."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .criteria import StrategyPair
from .gaussian import AffineProcess
from .market import PathEnsemble, propagate_transient_impact
from .picard import solve_fixed_point


def riccati_f(t, c, k, T):
    """Solution of f' = -f^2 + k on [0, T] with f(T) = -c.

    Written with expm1 so that the k > 0 branch stays accurate as k -> 0.
    Accepts complex ``t`` (useful for complex-step differentiation).
    """
    if c < 0 or k < 0:
        raise ValueError("riccati_f requires c >= 0 and k >= 0")
    t = np.asarray(t)
    if k > 0:
        sk = np.sqrt(k)
        E = np.expm1(2 * sk * (t - T))
        return (-2 * c + (sk - c) * E) / (2 + (sk - c) * E / sk)
    if c > 0:
        return -1.0 / (T - t + 1.0 / c)
    return np.zeros_like(t, dtype=float)


@dataclass(frozen=True)
class RiccatiFn:
    c: float
    k: float
    T: float

    def __call__(self, t):
        return riccati_f(t, self.c, self.k, self.T)


@dataclass(frozen=True)
class OrderCoefficients:
    eta: AffineProcess
    Q_I: AffineProcess
    nu: AffineProcess
    Q_B: AffineProcess


@dataclass
class PerturbationSeries:
    orders: list = field(default_factory=list)
    method: str = "explicit"

    @property
    def M(self):
        return len(self.orders) - 1


def _scalars(P):
    if P.K != 1 or P.D != 1:
        raise ValueError("the perturbation expansion is implemented for one asset and one "
                         "Brownian motion (K = D = 1)")
    g = {n: float(getattr(P, n)[0, 0]) for n in ("a", "b", "p", "phi", "psi", "rB", "rI")}
    g.update(qB=float(P.q_B0[0]), qI=float(P.q_I0[0]), y=float(P.y0[0]))
    return g


def _unit_impact(ens, nu):
    """int_0^t e^{(s-t)p} nu_s ds, the transient impact per unit of h."""
    return propagate_transient_impact(ens.params, ens.grid, nu, y0=np.zeros(1), h=np.eye(1))


def _homogeneous_impact(ens):
    """e^{-tp} y as a deterministic process."""
    return propagate_transient_impact(ens.params, ens.grid, ens.market.zeros())


def _trapezoid_cumulative(f, dt):
    out = np.zeros_like(f)
    out[1:] = np.cumsum(0.5 * (f[1:] + f[:-1]) * dt)
    return out


def _explicit(ens, cond, c, k, gamma, xi, A, B=None):
    """Closed-form solution of the linear forward-backward pair

        beta_t = E_t[-c phi_T + xi + int_t^T (A_s - k phi_s) ds] - e^{tp} E_t[int_t^T B_s ds],
        phi_t = gamma_t + int_0^t beta_s ds,

    through the Riccati function f(., c, k).
    """
    grid = ens.grid
    dt, times = grid.dt, grid.times
    p = float(ens.params.p[0, 0])
    f = riccati_f(times, c, k, grid.T)
    F = _trapezoid_cumulative(f, dt)
    integrand = A - gamma * k
    if B is not None:
        e_up = np.exp(p * times)
        integrand = integrand + B.backward_integral(dt) * (p * e_up) - B * e_up
    terminal = cond(-gamma.terminal() * c + xi) * np.exp(F[-1] - F)
    running = cond((integrand * np.exp(F)).backward_integral(dt)) * np.exp(-F)
    ell = terminal + running
    phi = gamma + (ell * np.exp(-F)).forward_integral(dt) * np.exp(F)
    beta = ell + (phi - gamma) * f
    return beta, phi


def _recursive(ens, cond, w, c, r, gamma, R, tol=1e-14, max_iter=500):
    """Solve beta_t = (1/2w) E_t[R_t - 2c phi_T - 2r int_t^T phi ds], phi = gamma + int beta.

    This is the discretised defining equation of each order, solved by
    iterating the (contracting) map phi -> gamma + int beta(phi).
    """
    dt = ens.grid.dt
    phi = gamma
    for _ in range(max_iter):
        beta = cond(R - phi.terminal() * (2 * c) - phi.backward_integral(dt) * (2 * r)) / (2 * w)
        new_phi = gamma + beta.forward_integral(dt)
        step = float(np.abs(new_phi.coef - phi.coef).max())
        phi = new_phi
        if step < tol * max(1.0, float(np.abs(phi.coef).max())):
            break
    beta = cond(R - phi.terminal() * (2 * c) - phi.backward_integral(dt) * (2 * r)) / (2 * w)
    return beta, phi


def order0_coefficients(params, ensemble: PathEnsemble, method="explicit") -> OrderCoefficients:
    """Zeroth-order (no impact) coefficients eta^0, Q^{I,0}, nu^0, Q^{B,0}."""
    ens = ensemble if params is None or params is ensemble.params else ensemble.with_params(params)
    g = _scalars(ens.params)
    m = ens.market
    dt = ens.grid.dt
    drift = m.alpha - _homogeneous_impact(ens) * g["p"]
    if method == "explicit":
        eta, QI = _explicit(ens, m.cond_F, g["psi"] / g["b"], g["rI"] / g["b"],
                            m.deterministic(g["qI"]), m.zeros(), drift / (2 * g["b"]))
        gamma = QI * -1.0 + (g["qB"] + g["qI"])
        nu, QB = _explicit(ens, m.cond_G, g["phi"] / g["a"], g["rB"] / g["a"],
                           gamma, m.zeros(), drift / (2 * g["a"]))
    elif method == "recursive":
        eta, QI = _recursive(ens, m.cond_F, g["b"], g["psi"], g["rI"],
                             m.deterministic(g["qI"]), drift.backward_integral(dt))
        gamma = QI * -1.0 + (g["qB"] + g["qI"])
        nu, QB = _recursive(ens, m.cond_G, g["a"], g["phi"], g["rB"],
                            gamma, drift.backward_integral(dt))
    else:
        raise ValueError("method must be 'explicit' or 'recursive'")
    return OrderCoefficients(eta=eta, Q_I=QI, nu=nu, Q_B=QB)


def orderm_coefficients(params, ensemble: PathEnsemble, previous, method="explicit") -> OrderCoefficients:
    """Order m = len(previous) coefficients from the orders below it."""
    if not previous:
        raise ValueError("orderm_coefficients needs the orders below m")
    ens = ensemble if params is None or params is ensemble.params else ensemble.with_params(params)
    g = _scalars(ens.params)
    m = ens.market
    dt, times = ens.grid.dt, ens.grid.times
    p = g["p"]
    prev = previous[-1]
    impact = _unit_impact(ens, prev.nu)
    trader_src = prev.nu - impact * p
    broker_src = prev.eta - impact * p
    if method == "explicit":
        eta, QI = _explicit(ens, m.cond_F, g["psi"] / g["b"], g["rI"] / g["b"],
                            m.zeros(), m.zeros(), trader_src / (2 * g["b"]))
        B = prev.Q_B * (p * np.exp(-p * times)) / (2 * g["a"])
        nu, QB = _explicit(ens, m.cond_G, g["phi"] / g["a"], g["rB"] / g["a"],
                           -QI, prev.Q_B.terminal() / (2 * g["a"]), broker_src / (2 * g["a"]), B)
    elif method == "recursive":
        eta, QI = _recursive(ens, m.cond_F, g["b"], g["psi"], g["rI"],
                             m.zeros(), trader_src.backward_integral(dt))
        kernel = (prev.Q_B * (p * np.exp(-p * times))).backward_integral(dt) * np.exp(p * times)
        R = prev.Q_B.terminal() + broker_src.backward_integral(dt) - kernel
        nu, QB = _recursive(ens, m.cond_G, g["a"], g["phi"], g["rB"], -QI, R)
    else:
        raise ValueError("method must be 'explicit' or 'recursive'")
    return OrderCoefficients(eta=eta, Q_I=QI, nu=nu, Q_B=QB)


def perturbation_series(ensemble: PathEnsemble, M: int, method="explicit", params=None):
    orders = [order0_coefficients(params, ensemble, method)]
    for _ in range(M):
        orders.append(orderm_coefficients(params, ensemble, orders, method))
    return PerturbationSeries(orders=orders, method=method)


def assemble_series(series: PerturbationSeries, h: float, M: int | None = None) -> StrategyPair:
    """Truncated sums eta = sum_{m<=M} h^m eta^m and nu = sum_{m<=M} h^m nu^m."""
    if h < 0:
        raise ValueError("h must be nonnegative")
    M = series.M if M is None else M
    if M > series.M:
        raise ValueError(f"series only holds orders up to {series.M}")
    nu, eta = series.orders[0].nu, series.orders[0].eta
    for m in range(1, M + 1):
        nu = nu + series.orders[m].nu * h**m
        eta = eta + series.orders[m].eta * h**m
    return StrategyPair(nu=nu, eta=eta)


@dataclass
class ScalingReport:
    M: int
    h: list
    norm_R_eta: list
    norm_R_nu: list
    ratio_eta: list
    ratio_nu: list
    slope_eta: float
    slope_nu: float
    dropped: list
    passed: bool

    def to_dict(self):
        return dict(self.__dict__)


def _loglog_slope(h, r):
    h, r = np.asarray(h), np.asarray(r)
    ok = (h > 0) & (r > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(h[ok]), np.log(r[ok]), 1)[0])


def remainder_scaling_study(params, ensemble: PathEnsemble, M: int, h_grid, method="recursive",
                            tol=1e-12, max_iter=500, series: PerturbationSeries | None = None):
    """Picard solution minus the order-M series, across a grid of impact strengths."""
    base = ensemble if params is None or params is ensemble.params else ensemble.with_params(params)
    if series is None or series.M < M:
        series = perturbation_series(base, M, method)
    h_used, R_eta, R_nu, dropped = [], [], [], []
    for h in sorted(h_grid, reverse=True):
        P_h = base.params.with_updates(h=float(h))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            bundle, trace = solve_fixed_point(base.with_params(P_h), tol=tol, max_iter=max_iter)
        if not trace.converged:
            dropped.append(float(h))
            continue
        pair = assemble_series(series, h, M)
        h_used.append(float(h))
        R_eta.append(float(np.sqrt(base.mc_norm_sq(bundle.eta - pair.eta))))
        R_nu.append(float(np.sqrt(base.mc_norm_sq(bundle.nu - pair.nu))))
    ratio_eta = [r / h**M for r, h in zip(R_eta, h_used)]
    ratio_nu = [r / h**M for r, h in zip(R_nu, h_used)]
    slope_eta, slope_nu = _loglog_slope(h_used, R_eta), _loglog_slope(h_used, R_nu)

    def decreasing(r):
        # h_used runs from largest to smallest, so ratios must fall along the list
        return len(r) >= 2 and all(b < a for a, b in zip(r, r[1:]))

    passed = (not dropped and decreasing(ratio_eta) and decreasing(ratio_nu)
              and slope_eta >= M + 0.5 and slope_nu >= M + 0.5)
    return ScalingReport(M, h_used, R_eta, R_nu, ratio_eta, ratio_nu, slope_eta, slope_nu,
                         dropped, bool(passed))
