"""Performance criteria of both agents, their Gateaux derivatives and concavity probes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussian import AffineProcess, apply_matrix, backward_integral, h2_norm_sq
from .market import PathEnsemble, propagate_inventories_and_cash, propagate_transient_impact
from .model import matrix_exp_grid


class FiltrationError(ValueError):
    """A strategy uses information its owner does not have."""


@dataclass(frozen=True)
class StrategyPair:
    """Broker rate nu (price-adapted) and trader rate eta (fully informed)."""

    nu: AffineProcess
    eta: AffineProcess


@dataclass(frozen=True)
class CriterionValue:
    mean: float
    std_error: float
    n_paths: int
    per_path: np.ndarray = field(repr=False, compare=False, default=None)


def _summary(values):
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return CriterionValue(float(values.mean()), se, n, values)


def _as_process(ensemble, x):
    if isinstance(x, AffineProcess):
        return x
    x = np.asarray(x, dtype=float)
    if x.shape == (ensemble.grid.n_steps + 1, ensemble.params.K):
        return ensemble.market.deterministic(x)
    raise TypeError("strategies must be AffineProcess objects or deterministic (N+1, K) arrays")


def check_tags(ensemble: PathEnsemble, nu=None, eta=None):
    """Reject a broker strategy that is not price-adapted or a trader strategy that peeks ahead."""
    market = ensemble.market
    if nu is not None and not market.is_G_adapted(nu):
        raise FiltrationError("broker strategy is not adapted to the price filtration")
    if eta is not None and not market.is_F_adapted(eta):
        raise FiltrationError("trader strategy is not adapted to the full filtration")


@dataclass
class _States:
    nu: np.ndarray
    eta: np.ndarray
    Y: np.ndarray
    Q_B: np.ndarray
    Q_I: np.ndarray


def _states(ensemble, nu, eta):
    nu_v, eta_v = ensemble.values(nu), ensemble.values(eta)
    Y = propagate_transient_impact(ensemble.params, ensemble.grid, nu_v)
    Q_B, Q_I, _, _ = propagate_inventories_and_cash(
        ensemble.params, ensemble.grid, nu_v, eta_v, ensemble.z, Y)
    return _States(nu_v, eta_v, Y, Q_B, Q_I)


def _dot(x, y):
    return np.einsum("...k,...k->...", x, y)


def _integrate(x, dt):
    return np.sum(x[:, :-1], axis=1) * dt


def _running_JI(ens, s):
    P = ens.params
    drift = (ens.alpha + apply_matrix(P.h, s.nu) - apply_matrix(P.p, s.Y)
             - 2 * apply_matrix(P.psi, s.eta) - apply_matrix(P.rI, s.Q_I))
    integrand = -_dot(s.eta, apply_matrix(P.b, s.eta)) + _dot(drift, s.Q_I)
    const = P.x_I0 + (P.S0 - P.psi @ P.q_I0) @ P.q_I0
    return const + _integrate(integrand, ens.grid.dt)


def _running_JB(ens, s):
    P = ens.params
    drift = (ens.alpha + apply_matrix(P.h - 2 * P.phi, s.nu) - apply_matrix(P.p, s.Y)
             + 2 * apply_matrix(P.phi, s.eta) - apply_matrix(P.rB, s.Q_B))
    integrand = (-_dot(s.nu, apply_matrix(P.a, s.nu)) + _dot(s.eta, apply_matrix(P.b, s.eta))
                 + _dot(drift, s.Q_B))
    const = P.x_B0 + (P.S0 - P.phi @ P.q_B0) @ P.q_B0
    return const + _integrate(integrand, ens.grid.dt)


def evaluate_JI(ensemble: PathEnsemble, nu, eta) -> CriterionValue:
    """Trader's criterion in running-cost form, averaged over the ensemble."""
    nu, eta = _as_process(ensemble, nu), _as_process(ensemble, eta)
    check_tags(ensemble, nu, eta)
    return _summary(_running_JI(ensemble, _states(ensemble, nu, eta)))


def evaluate_JB(ensemble: PathEnsemble, nu, eta) -> CriterionValue:
    """Broker's criterion in running-cost form, averaged over the ensemble."""
    nu, eta = _as_process(ensemble, nu), _as_process(ensemble, eta)
    check_tags(ensemble, nu, eta)
    return _summary(_running_JB(ensemble, _states(ensemble, nu, eta)))


def evaluate_terminal_forms(ensemble: PathEnsemble, nu, eta):
    """Both criteria from simulated cash and marked-to-market terminal inventory.

    Returns ``(J_I, J_B)``; compare with the running-cost forms on the same paths.
    """
    nu, eta = _as_process(ensemble, nu), _as_process(ensemble, eta)
    check_tags(ensemble, nu, eta)
    P, dt = ensemble.params, ensemble.grid.dt
    nu_v, eta_v = ensemble.values(nu), ensemble.values(eta)
    Y = propagate_transient_impact(P, ensemble.grid, nu_v)
    Q_B, Q_I, X_B, X_I = propagate_inventories_and_cash(P, ensemble.grid, nu_v, eta_v, ensemble.z, Y)
    S_T = Y[:, -1] + ensemble.z[:, -1]
    JI = (X_I[:, -1] + _dot(S_T - Q_I[:, -1] @ P.psi.T, Q_I[:, -1])
          - _integrate(_dot(Q_I, apply_matrix(P.rI, Q_I)), dt))
    JB = (X_B[:, -1] + _dot(S_T - Q_B[:, -1] @ P.phi.T, Q_B[:, -1])
          - _integrate(_dot(Q_B, apply_matrix(P.rB, Q_B)), dt))
    return _summary(JI), _summary(JB)


def trader_gradient(ensemble, s: _States):
    """Integrand of the trader's Gateaux derivative at each node (sampled paths)."""
    P, dt = ensemble.params, ensemble.grid.dt
    U = (ensemble.alpha + apply_matrix(P.h, s.nu) - apply_matrix(P.p, s.Y)
         - 2 * apply_matrix(P.psi, s.eta) - 2 * apply_matrix(P.rI, s.Q_I))
    grad = (-2 * apply_matrix(P.b, s.eta) - 2 * apply_matrix(P.psi, s.Q_I)
            + backward_integral(U, dt))
    return grad, U


def broker_gradient(ensemble, s: _States):
    """Integrand of the broker's Gateaux derivative at each node (sampled paths)."""
    P, grid = ensemble.params, ensemble.grid
    dt, times = grid.dt, grid.times
    two_phi_h = 2 * P.phi - P.h
    U = (ensemble.alpha + 2 * apply_matrix(P.phi, s.eta) - apply_matrix(two_phi_h, s.nu)
         - apply_matrix(P.p, s.Y) - 2 * apply_matrix(P.rB, s.Q_B))
    # int_t^T h e^{(t-s)p} p Q_s ds = h e^{tp} int_t^T e^{-sp} p Q_s ds
    e_minus = matrix_exp_grid(-P.p, times)
    e_plus = matrix_exp_grid(P.p, times)
    inner = backward_integral(apply_matrix(e_minus @ P.p, s.Q_B), dt)
    kernel = apply_matrix(P.h @ e_plus, inner)
    grad = (-2 * apply_matrix(P.a, s.nu) - apply_matrix(two_phi_h, s.Q_B)
            + backward_integral(U, dt) - kernel)
    U_full = U - apply_matrix(P.h @ P.p, s.Q_B)
    return grad, U_full


@dataclass(frozen=True)
class GateauxReport:
    value: float
    std_error: float
    fd_value: float
    fd_std_error: float
    diff_std_error: float
    allowance: float
    tolerance: float
    direction_norm: float
    passed: bool
    direction: str = ""
    stationary_tolerance: float = float("nan")
    stationary: bool = False


def _gateaux(ensemble, nu, eta, direction, agent, eps, description, slack):
    dt = ensemble.grid.dt
    s = _states(ensemble, nu, eta)
    d_v = ensemble.values(direction)
    if agent == "trader":
        grad, U = trader_gradient(ensemble, s)
        J = lambda e: _running_JI(ensemble, _states(ensemble, nu, e))  # noqa: E731
        plus, minus = J(eta + eps * direction), J(eta - eps * direction)
    else:
        grad, U = broker_gradient(ensemble, s)
        J = lambda n: _running_JB(ensemble, _states(ensemble, n, eta))  # noqa: E731
        plus, minus = J(nu + eps * direction), J(nu - eps * direction)
    pairing = _integrate(_dot(d_v, grad), dt)
    fd = (plus - minus) / (2 * eps)
    val, fdv, diff = _summary(pairing), _summary(fd), _summary(pairing - fd)
    d_norm = float(np.sqrt(np.mean(h2_norm_sq(d_v, dt))))
    # the pairing integrates over [t, T] while the discrete criterion's exact
    # derivative integrates over (t, T]; the gap is dt * <d, U> in H^2
    allowance = dt * d_norm * float(np.sqrt(np.mean(h2_norm_sq(U, dt))))
    roundoff = 1e-9 * (1 + np.abs(plus).mean() + np.abs(minus).mean()) / eps
    tol = 3 * diff.std_error + allowance + roundoff
    # at a maximiser the pairing itself should vanish
    stat_tol = 3 * val.std_error + slack * d_norm
    return GateauxReport(val.mean, val.std_error, fdv.mean, fdv.std_error, diff.std_error,
                         allowance, tol, d_norm, bool(abs(diff.mean) <= tol), description,
                         stat_tol, bool(abs(val.mean) <= stat_tol))


def gateaux_JI(ensemble: PathEnsemble, nu, eta, kappa, eps=1e-4, description="",
               slack=0.02) -> GateauxReport:
    nu, eta, kappa = (_as_process(ensemble, x) for x in (nu, eta, kappa))
    check_tags(ensemble, nu, eta)
    check_tags(ensemble, eta=kappa)
    return _gateaux(ensemble, nu, eta, kappa, "trader", eps, description, slack)


def gateaux_JB(ensemble: PathEnsemble, nu, eta, zeta, eps=1e-4, description="",
               slack=0.02) -> GateauxReport:
    nu, eta, zeta = (_as_process(ensemble, x) for x in (nu, eta, zeta))
    check_tags(ensemble, nu, eta)
    check_tags(ensemble, nu=zeta)
    return _gateaux(ensemble, nu, eta, zeta, "broker", eps, description, slack)


@dataclass(frozen=True)
class DeviationReport:
    agent: str
    delta: float
    improvement: float
    std_error: float
    passed: bool


def deviation_check(ensemble: PathEnsemble, nu, eta, direction, delta, agent) -> DeviationReport:
    """Does moving one agent's strategy by delta * direction raise that agent's criterion?"""
    nu, eta, direction = (_as_process(ensemble, x) for x in (nu, eta, direction))
    if agent == "trader":
        check_tags(ensemble, nu, eta + direction)
        base = _running_JI(ensemble, _states(ensemble, nu, eta))
        dev = _running_JI(ensemble, _states(ensemble, nu, eta + delta * direction))
    elif agent == "broker":
        check_tags(ensemble, nu + direction, eta)
        base = _running_JB(ensemble, _states(ensemble, nu, eta))
        dev = _running_JB(ensemble, _states(ensemble, nu + delta * direction, eta))
    else:
        raise ValueError("agent must be 'trader' or 'broker'")
    gain = _summary(dev - base)
    return DeviationReport(agent, float(delta), gain.mean, gain.std_error,
                           bool(gain.mean <= 3 * gain.std_error))


@dataclass(frozen=True)
class ConcavityReport:
    agent: str
    rho: tuple
    gap: tuple
    std_error: tuple
    passed: bool


def concavity_probe(ensemble: PathEnsemble, fixed, x, y, rhos=(0.25, 0.5, 0.75), agent="trader"):
    """Chord test J(rho x + (1-rho) y) >= rho J(x) + (1-rho) J(y) - 3 SE in the agent's own strategy.

    For the trader ``fixed`` is the broker's strategy and x, y are trader
    strategies; for the broker it is the other way round.
    """
    fixed, x, y = (_as_process(ensemble, v) for v in (fixed, x, y))
    if agent == "trader":
        check_tags(ensemble, fixed, x)
        check_tags(ensemble, eta=y)
        J = lambda e: _running_JI(ensemble, _states(ensemble, fixed, e))  # noqa: E731
    elif agent == "broker":
        check_tags(ensemble, x, fixed)
        check_tags(ensemble, nu=y)
        J = lambda n: _running_JB(ensemble, _states(ensemble, n, fixed))  # noqa: E731
    else:
        raise ValueError("agent must be 'trader' or 'broker'")
    Jx, Jy = J(x), J(y)
    gaps, ses = [], []
    for rho in rhos:
        g = _summary(J(rho * x + (1 - rho) * y) - rho * Jx - (1 - rho) * Jy)
        gaps.append(g.mean)
        ses.append(g.std_error)
    passed = all(g >= -3 * s - 1e-12 * (1 + abs(Jx.mean()) + abs(Jy.mean()))
                 for g, s in zip(gaps, ses))
    return ConcavityReport(agent, tuple(rhos), tuple(gaps), tuple(ses), bool(passed))


def random_direction(ensemble: PathEnsemble, rng, filtration="F", scale=1.0):
    """A smooth random perturbation adapted to the requested filtration.

    Built as c0(t) + c1(t) (z_t - z_0) + c2(t) alpha_hat_t (+ c3(t) alpha_t for
    the full filtration) with random quadratic coefficient functions of t/T.
    """
    market = ensemble.market
    P = ensemble.params
    s = ensemble.grid.times / ensemble.grid.T
    basis = np.stack([np.ones_like(s), s, s**2], axis=1)

    def coeff():
        return basis @ rng.standard_normal((3, P.K)) * scale

    out = market.deterministic(coeff())
    feats = [market.z - P.z0, market.alpha_hat]
    if filtration == "F":
        feats.append(market.alpha)
    elif filtration != "G":
        raise ValueError("filtration must be 'F' or 'G'")
    for f in feats:
        out = out + f * coeff()
    return out
