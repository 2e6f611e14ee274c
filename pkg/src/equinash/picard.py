"""Fixed-point map for the equilibrium, Picard iteration and its diagnostics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .criteria import FiltrationError
from .gaussian import AffineProcess
from .market import PathEnsemble, propagate_transient_impact
from .model import contraction_constant, matrix_exp_grid

COMPONENTS = ("nu", "eta", "Y", "Q_B", "Q_I")


@dataclass(frozen=True)
class StateBundle:
    """The quintuple (nu, eta, Y, Q_B, Q_I) the fixed-point map acts on."""

    nu: AffineProcess
    eta: AffineProcess
    Y: AffineProcess
    Q_B: AffineProcess
    Q_I: AffineProcess

    @classmethod
    def zeros(cls, market):
        return cls(*(market.zeros() for _ in COMPONENTS))

    def components(self):
        return tuple(getattr(self, f.name) for f in fields(self))

    def __sub__(self, other):
        return StateBundle(*(x - y for x, y in zip(self.components(), other.components())))

    def __add__(self, other):
        return StateBundle(*(x + y for x, y in zip(self.components(), other.components())))

    def scaled(self, c):
        return StateBundle(*(x * c for x in self.components()))

    def component_norms(self, ensemble: PathEnsemble):
        return np.sqrt([ensemble.mc_norm_sq(x) for x in self.components()])

    def norm(self, ensemble: PathEnsemble):
        """Discrete T-norm: root of the summed Monte Carlo H^2 norms squared."""
        return float(np.sqrt(np.sum(self.component_norms(ensemble) ** 2)))


def check_bundle_tags(ensemble, bundle: StateBundle):
    m = ensemble.market
    for name in ("nu", "Y"):
        if not m.is_G_adapted(getattr(bundle, name)):
            raise FiltrationError(f"{name} is not adapted to the price filtration")
    for name in ("eta", "Q_B", "Q_I"):
        if not m.is_F_adapted(getattr(bundle, name)):
            raise FiltrationError(f"{name} is not adapted to the full filtration")


def _kernel_term(params, grid, Q):
    """h e^{t p} int_t^T e^{-s p} p Q_s ds, i.e. int_t^T h e^{(t-s)p} p Q_s ds."""
    times = grid.times
    inner = Q.matmul(matrix_exp_grid(-params.p, times) @ params.p).backward_integral(grid.dt)
    return inner.matmul(params.h @ matrix_exp_grid(params.p, times))


def apply_phi(ensemble: PathEnsemble, bundle: StateBundle, check=True) -> StateBundle:
    """One application of the fixed-point map.

    The broker's update conditions on prices, the trader's on everything seen
    so far; both conditional expectations are exact for affine processes.
    """
    if check:
        check_bundle_tags(ensemble, bundle)
    P, grid, m = ensemble.params, ensemble.grid, ensemble.market
    dt = grid.dt
    nu, eta, Y, QB, QI = bundle.components()
    alpha = m.alpha
    half_ai = 0.5 * np.linalg.inv(P.a)
    half_bi = 0.5 * np.linalg.inv(P.b)

    QB_T = ((nu - eta).forward_integral(dt) + P.q_B0).terminal()
    broker = (-QB_T.matmul(2 * P.phi - P.h)
              + (alpha + eta.matmul(P.h) - Y.matmul(P.p) - QB.matmul(2 * P.rB)).backward_integral(dt)
              - _kernel_term(P, grid, QB))
    new_nu = m.cond_G(broker).matmul(half_ai)

    QI_T = (eta.forward_integral(dt) + P.q_I0).terminal()
    trader = (-QI_T.matmul(2 * P.psi)
              + (alpha + nu.matmul(P.h) - Y.matmul(P.p) - QI.matmul(2 * P.rI)).backward_integral(dt))
    new_eta = m.cond_F(trader).matmul(half_bi)

    new_Y = propagate_transient_impact(P, grid, nu)
    new_QB = (nu - eta).forward_integral(dt) + P.q_B0
    new_QI = eta.forward_integral(dt) + P.q_I0
    return StateBundle(new_nu, new_eta, new_Y, new_QB, new_QI)


@dataclass
class ConvergenceTrace:
    deltas: list = field(default_factory=list)
    component_deltas: list = field(default_factory=list)
    converged: bool = False
    outside_guarantee: bool = False
    contraction_constant: float = float("nan")
    final_residual: float = float("nan")

    @property
    def iterations(self):
        return len(self.deltas)

    def fitted_ratio(self, floor=1e-12):
        """Per-iteration contraction factor from a log-linear fit of the deltas.

        Deltas within ``floor`` of round-off relative to the first delta are
        excluded; fewer than two usable points give ratio 0.
        """
        d = np.asarray(self.deltas, dtype=float)
        if d.size == 0 or d[0] == 0:
            return 0.0
        use = np.flatnonzero(d > floor * d[0])
        if use.size < 2:
            return 0.0
        slope = np.polyfit(use, np.log(d[use]), 1)[0]
        return float(np.exp(slope))

    def max_step_ratio(self, floor=1e-12):
        d = np.asarray(self.deltas, dtype=float)
        if d.size < 2 or d[0] == 0:
            return 0.0
        ok = d[:-1] > floor * d[0]
        r = d[1:][ok] / d[:-1][ok]
        return float(r.max()) if r.size else 0.0

    def rows(self):
        for i, (d, comp) in enumerate(zip(self.deltas, self.component_deltas), start=1):
            yield (i, d, *comp)


def solve_fixed_point(ensemble: PathEnsemble, params=None, tol=1e-6, max_iter=200,
                      relaxation=1.0, initial: StateBundle | None = None):
    """Iterate the fixed-point map from zero until the T-norm step drops below ``tol``."""
    if params is not None and params is not ensemble.params:
        ensemble = ensemble.with_params(params)
    C = contraction_constant(ensemble.params)
    trace = ConvergenceTrace(contraction_constant=C, outside_guarantee=C >= 1)
    if trace.outside_guarantee:
        warnings.warn(f"C(T) = {C:.4g} >= 1: convergence is not guaranteed", RuntimeWarning,
                      stacklevel=2)
    current = StateBundle.zeros(ensemble.market) if initial is None else initial
    best, best_delta = current, np.inf
    for _ in range(max_iter):
        image = apply_phi(ensemble, current, check=False)
        step = image - current
        comp = step.component_norms(ensemble)
        delta = float(np.sqrt(np.sum(comp**2)))
        trace.deltas.append(delta)
        trace.component_deltas.append(tuple(float(c) for c in comp))
        current = image if relaxation == 1.0 else current + step.scaled(relaxation)
        if delta < best_delta:
            best, best_delta = current, delta
        if not np.isfinite(delta):
            break
        if delta < tol:
            trace.converged = True
            break
    if not trace.converged:
        warnings.warn(f"fixed-point iteration stopped after {trace.iterations} sweeps "
                      f"without reaching tol={tol}", RuntimeWarning, stacklevel=2)
        current = best
    trace.final_residual = (apply_phi(ensemble, current, check=False) - current).norm(ensemble)
    return current, trace


def solve_fixed_point_krylov(ensemble: PathEnsemble, params=None, tol=1e-10, max_iter=50,
                             restart=200):
    """Solve the same fixed-point equation with GMRES instead of plain iteration.

    The map is affine, Phi(U) = L U + Phi(0), so the fixed point solves
    (I - L) U = Phi(0).  Useful beyond the contraction regime where Picard
    sweeps diverge.  The trace records one delta: the final T-norm residual.
    """
    if params is not None and params is not ensemble.params:
        ensemble = ensemble.with_params(params)
    C = contraction_constant(ensemble.params)
    zero = StateBundle.zeros(ensemble.market)
    shape = zero.nu.coef.shape
    size = int(np.prod(shape))

    def unflatten(v):
        return StateBundle(*(AffineProcess(v[i * size:(i + 1) * size].reshape(shape))
                             for i in range(len(COMPONENTS))))

    def flatten(b):
        return np.concatenate([c.coef.ravel() for c in b.components()])

    offset = flatten(apply_phi(ensemble, zero, check=False))

    def matvec(v):
        return v - (flatten(apply_phi(ensemble, unflatten(v), check=False)) - offset)

    op = LinearOperator((offset.size, offset.size), matvec=matvec, dtype=float)
    x, info = gmres(op, offset, rtol=1e-13, atol=0.0, restart=restart, maxiter=max_iter)
    bundle = unflatten(x)
    residual = (apply_phi(ensemble, bundle, check=False) - bundle).norm(ensemble)
    trace = ConvergenceTrace(deltas=[residual], component_deltas=[(np.nan,) * len(COMPONENTS)],
                             converged=bool(residual < tol), outside_guarantee=C >= 1,
                             contraction_constant=C, final_residual=residual)
    if not trace.converged:
        warnings.warn(f"GMRES stopped (info={info}) with residual {residual:.3g} above tol={tol}",
                      RuntimeWarning, stacklevel=2)
    return bundle, trace


def random_bundle(ensemble: PathEnsemble, rng, rough=True):
    """Random element of the bundle space with the right adaptedness per component."""
    m = ensemble.market
    n1, n_nodes, K = m.zeros().shape
    s = ensemble.grid.times / ensemble.grid.T

    def draw():
        coef = np.zeros((n1, n_nodes, K))
        coef[0] = np.stack([s**i for i in range(3)], axis=1) @ rng.standard_normal((3, K))
        if rough:
            coef[1:] = rng.standard_normal((n1 - 1, n_nodes, K)) * np.sqrt(1.0 / (n1 - 1))
        else:
            coef[1:] = rng.standard_normal((n1 - 1, 1, K)) * np.sqrt(2.0 / (n1 - 1)) * s[:, None]
        return AffineProcess(coef)

    return StateBundle(m.cond_G(draw()), m.cond_F(draw()), m.cond_G(draw()),
                       m.cond_F(draw()), m.cond_F(draw()))


@dataclass(frozen=True)
class ContractionReport:
    ratios: tuple
    max_ratio: float
    contraction_constant: float
    slack: float
    passed: bool


def contraction_probe(ensemble: PathEnsemble, params=None, n_pairs=100, seed=0, slack=0.05):
    """Measured ||Phi(U) - Phi(V)||^2 / ||U - V||^2 over random bundle pairs."""
    if params is not None and params is not ensemble.params:
        ensemble = ensemble.with_params(params)
    C = contraction_constant(ensemble.params)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    ratios = []
    for i in range(n_pairs):
        rough = i % 2 == 0
        U, V = random_bundle(ensemble, rng, rough), random_bundle(ensemble, rng, rough)
        den = (U - V).norm(ensemble) ** 2
        if den == 0:
            continue
        num = (apply_phi(ensemble, U) - apply_phi(ensemble, V)).norm(ensemble) ** 2
        ratios.append(num / den)
    mx = max(ratios) if ratios else 0.0
    return ContractionReport(tuple(ratios), mx, C, slack, bool(mx <= C + slack))


@dataclass
class FBSDEResiduals:
    """Terminal and drift residuals of the forward-backward characterisation.

    Each entry maps a name to ``(norm, std_error)``.  Drift residuals are the
    largest ensemble norm of the running sum of one-step residuals.
    """

    terminal: dict
    drift: dict
    tolerance: dict
    passed: bool


def _norm_se(values):
    """Ensemble root-mean-square with a delta-method standard error."""
    sq = np.sum(np.asarray(values) ** 2, axis=-1)
    m = float(sq.mean())
    se_m = float(sq.std(ddof=1) / np.sqrt(len(sq))) if len(sq) > 1 else 0.0
    r = np.sqrt(m)
    return r, (se_m / (2 * r) if r > 0 else 0.0)


def fbsde_consistency_check(ensemble: PathEnsemble, bundle: StateBundle, residual_tol=1e-5):
    """Terminal conditions and integrated drifts of the equilibrium FBSDE system."""
    fp = (apply_phi(ensemble, bundle) - bundle).norm(ensemble)
    if fp > residual_tol:
        raise ValueError(f"bundle is not a converged fixed point (residual {fp:.3g})")
    P, grid, m = ensemble.params, ensemble.grid, ensemble.market
    dt, times = grid.dt, grid.times
    ai, bi = np.linalg.inv(P.a), np.linalg.inv(P.b)
    nu, eta, Y, QB, QI = bundle.components()

    alpha_hat = m.alpha_hat
    eta_hat, QB_hat, QI_hat = m.cond_G(eta), m.cond_G(QB), m.cond_G(QI)
    inner = QB_hat.matmul(matrix_exp_grid(-P.p, times) @ P.p).backward_integral(dt)
    Z = m.cond_G(inner).matmul(matrix_exp_grid(P.p, times))

    def last(x):
        return ensemble.values(x)[:, -1]

    terminal = {
        "nu_T": _norm_se(last(nu) + last(QB_hat) @ (0.5 * ai @ (2 * P.phi - P.h)).T),
        "eta_T": _norm_se(last(eta) + last(QI) @ (bi @ P.psi).T),
        "Z_T": _norm_se(last(Z)),
        "eta_hat_T": _norm_se(last(eta_hat) + last(QI_hat) @ (bi @ P.psi).T),
    }

    def shift(x):
        out = x.coef.copy()
        out[:, :-1] = x.coef[:, 1:]
        return AffineProcess(out)

    def step_residual(x, drift, cond):
        """cond_t[x_{t+dt}] - x_t - drift_t dt on nodes 0..N-1 (zero at N)."""
        r = cond(shift(x)) - x - drift * dt
        r.coef[:, -1] = 0.0
        return r

    half_a, half_b = 0.5 * ai, 0.5 * bi
    lines = {
        "nu": step_residual(nu, -(alpha_hat - QB_hat.matmul(2 * P.rB + P.h @ P.p) - Y.matmul(P.p)
                                  + (eta_hat + Z.matmul(P.p)).matmul(P.h)).matmul(half_a), m.cond_G),
        "eta": step_residual(eta, -(m.alpha - QI.matmul(2 * P.rI) + nu.matmul(P.h)
                                    - Y.matmul(P.p)).matmul(half_b), m.cond_F),
        "Z": step_residual(Z, (Z - QB_hat).matmul(P.p), m.cond_G),
        "eta_hat": step_residual(eta_hat, -(alpha_hat - QI_hat.matmul(2 * P.rI) + nu.matmul(P.h)
                                            - Y.matmul(P.p)).matmul(half_b), m.cond_G),
        "Q_B_hat": step_residual(QB_hat, nu - eta_hat, m.cond_G),
        "Q_I_hat": step_residual(QI_hat, eta_hat, m.cond_G),
    }
    drift = {}
    for name, r in lines.items():
        cum = ensemble.values(r.forward_integral(1.0))
        norms = [_norm_se(cum[:, k]) for k in range(cum.shape[1])]
        drift[name] = max(norms, key=lambda t: t[0])
    tol = {}
    passed = True
    for group in (terminal, drift):
        for name, (val, se) in group.items():
            tol[name] = 3 * se + 2 * dt
            passed &= val <= tol[name]
    return FBSDEResiduals(terminal, drift, tol, bool(passed))
