"""The broker's information: Kalman filtering of the signal and projections onto prices."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .market import PathEnsemble, ou_transition, psd_sqrt
from .model import ModelParams, TimeGrid


@dataclass(frozen=True)
class FilterState:
    """Per-node conditional mean and covariance of alpha given observed prices.

    ``mean`` has shape (n_paths, N+1, K); ``cov`` is path independent, (N+1, K, K).
    Innovations are Delta z_k - mean_k dt with covariance ``innovation_cov``.
    """

    mean: np.ndarray
    cov: np.ndarray
    innovations: np.ndarray
    innovation_cov: np.ndarray


def kalman_filter(params: ModelParams, grid: TimeGrid, z) -> FilterState:
    """Discrete Kalman recursion for alpha observed through Delta z = alpha dt + sigma dW."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 2
    if single:
        z = z[None]
    K, N, dt = params.K, grid.n_steps, grid.dt
    R = params.sigma @ params.sigma.T * dt
    if np.linalg.matrix_rank(R) < K:
        raise np.linalg.LinAlgError("innovation covariance sigma sigma^T dt is singular")
    A, c, L = ou_transition(params.signal, dt)
    Qd = L @ L.T
    n = z.shape[0]
    mean = np.empty((n, N + 1, K))
    cov = np.empty((N + 1, K, K))
    innov = np.empty((n, N, K))
    innov_cov = np.empty((N, K, K))
    m = np.broadcast_to(params.signal.alpha0_mean, (n, K)).copy()
    P = np.array(params.signal.alpha0_var, dtype=float)
    dz = np.diff(z, axis=1)
    for k in range(N):
        mean[:, k], cov[k] = m, P
        S = P * dt * dt + R
        gain = np.linalg.solve(S, P * dt).T
        e = dz[:, k] - m * dt
        innov[:, k], innov_cov[k] = e, S
        m_post = m + e @ gain.T
        P_post = P - gain @ (P * dt)
        m = m_post @ A.T + c
        P = A @ P_post @ A.T + Qd
        P = 0.5 * (P + P.T)
    mean[:, N], cov[N] = m, P
    if single:
        mean, innov = mean[0], innov[0]
    return FilterState(mean=mean, cov=cov, innovations=innov, innovation_cov=innov_cov)


def innovation_autocorrelation(state: FilterState, max_lag=5, component=0):
    """Sample autocorrelation of standardized innovations along one path."""
    e = state.innovations
    if e.ndim == 3:
        e = e[0]
    s = e[:, component] / np.sqrt(state.innovation_cov[:, component, component])
    s = s - s.mean()
    denom = np.dot(s, s)
    return np.array([np.dot(s[:-lag], s[lag:]) / denom for lag in range(1, max_lag + 1)])


@dataclass
class ProjectionModel:
    """Node-local regression basis for projections onto the price filtration.

    ``features`` names per-node regressors: ``"z"`` and ``"alpha_hat"`` are
    supplied by the ensemble, anything else must be passed as an extra array.
    With ``degree=2`` all pairwise products are added.  A node's constant
    features (for instance the time stamp) are absorbed by the intercept.
    """

    features: tuple = ("z", "alpha_hat")
    degree: int = 2
    ridge: float = 1e-8
    coefficients: list = field(default_factory=list)
    rank_deficient_nodes: list = field(default_factory=list)

    @property
    def n_regressors(self):
        return n_regressors(len(self.features), self.degree)


def n_regressors(n_base, degree):
    base = 1 + n_base
    return base + (n_base * (n_base + 1) // 2 if degree >= 2 else 0)


def _design(columns, degree):
    cols = [np.ones(columns[0].shape[0])] + list(columns)
    if degree >= 2:
        for i, j in combinations_with_replacement(range(len(columns)), 2):
            cols.append(columns[i] * columns[j])
    return np.column_stack(cols)


def _fit_node(X, y, ridge):
    """Least squares with near-constant columns removed; ridge fallback when singular."""
    scale = X.std(axis=0)
    keep = np.ones(X.shape[1], dtype=bool)
    keep[1:] = scale[1:] > 1e-12 * max(1.0, float(np.abs(X).max()))
    Xk = X[:, keep]
    mu = Xk[:, 1:].mean(axis=0)
    sd = Xk[:, 1:].std(axis=0)
    Z = np.column_stack([np.ones(len(Xk)), (Xk[:, 1:] - mu) / sd]) if Xk.shape[1] > 1 else Xk
    coef, _, rank, _ = np.linalg.lstsq(Z, y, rcond=None)
    deficient = rank < Z.shape[1]
    if deficient:
        G = Z.T @ Z + ridge * np.eye(Z.shape[1])
        coef = np.linalg.solve(G, Z.T @ y)
    return Z @ coef, (keep, mu, sd, coef), deficient


def project_onto_observation(ensemble: PathEnsemble, target, model: ProjectionModel | None = None,
                             extra=None):
    """Cross-sectional least-squares projection of ``target`` onto price-measurable features.

    ``target`` is an array (n_paths, N+1, K) or (n_paths, N+1).  Returns the
    fitted values with the same shape and the fitted model.
    """
    model = ProjectionModel() if model is None else model
    extra = {} if extra is None else extra
    y = np.asarray(target, dtype=float)
    squeeze = y.ndim == 2
    if squeeze:
        y = y[..., None]
    n_paths, n_nodes = y.shape[:2]
    if n_paths < 10 * model.n_regressors:
        raise ValueError(f"need at least {10 * model.n_regressors} paths for {model.n_regressors} regressors")

    sources = {"z": ensemble.z, "alpha_hat": ensemble.alpha_hat}
    sources.update({k: np.asarray(v, dtype=float) for k, v in extra.items()})
    missing = [f for f in model.features if f not in sources and f != "t"]
    if missing:
        raise KeyError(f"unknown features: {missing}")

    def node_columns(k):
        cols = []
        for name in model.features:
            if name == "t":
                cols.append(np.full(n_paths, ensemble.grid.times[k]))
                continue
            src = sources[name]
            src = src[:, k] if src.ndim == 2 else src[:, k, :]
            cols.extend(np.atleast_2d(src.T) if src.ndim == 2 else [src])
        return cols

    out = np.empty_like(y)
    model.coefficients = []
    model.rank_deficient_nodes = []
    for k in range(n_nodes):
        X = _design(node_columns(k), model.degree)
        fitted, fit, deficient = _fit_node(X, y[:, k], model.ridge)
        out[:, k] = fitted
        model.coefficients.append(fit)
        if deficient:
            model.rank_deficient_nodes.append(k)
    if model.rank_deficient_nodes:
        warnings.warn(f"rank-deficient regression at {len(model.rank_deficient_nodes)} nodes; "
                      "ridge fallback used", RuntimeWarning, stacklevel=2)
    return (out[..., 0] if squeeze else out), model


@dataclass(frozen=True)
class ParticleEstimate:
    mean: np.ndarray
    std_error: np.ndarray
    ess: np.ndarray
    degenerate: bool


def particle_filter_oracle(params: ModelParams, grid: TimeGrid, z, n_particles: int,
                           seed: int = 0) -> ParticleEstimate:
    """Bootstrap particle filter for E[alpha_t | prices up to t] along one path."""
    z = np.asarray(z, dtype=float)
    K, N, dt = params.K, grid.n_steps, grid.dt
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    A, c, L = ou_transition(params.signal, dt)
    R = params.sigma @ params.sigma.T * dt
    R_inv = np.linalg.inv(R)
    x = params.signal.alpha0_mean + rng.standard_normal((n_particles, K)) @ psd_sqrt(
        params.signal.alpha0_var).T
    logw = np.zeros(n_particles)
    mean = np.empty((N + 1, K))
    se = np.empty((N + 1, K))
    ess = np.empty(N + 1)
    every_step = False

    def summarize(k):
        w = np.exp(logw - logw.max())
        w /= w.sum()
        mean[k] = w @ x
        var = w @ (x - mean[k]) ** 2
        ess[k] = 1.0 / np.sum(w**2)
        se[k] = np.sqrt(var / ess[k])

    dz = np.diff(z, axis=0)
    for k in range(N):
        summarize(k)
        r = dz[k] - x * dt
        logw = logw - 0.5 * np.einsum("ni,ij,nj->n", r, R_inv, r)
        w = np.exp(logw - logw.max())
        w /= w.sum()
        updated_ess = 1.0 / np.sum(w**2)
        if updated_ess < 0.01 * n_particles and not every_step:
            every_step = True
            warnings.warn("particle degeneracy: effective sample size below 1%, "
                          "resampling at every step", RuntimeWarning, stacklevel=2)
        if every_step or updated_ess < 0.5 * n_particles:
            u = (rng.random() + np.arange(n_particles)) / n_particles
            idx = np.minimum(np.searchsorted(np.cumsum(w), u), n_particles - 1)
            x = x[idx]
            logw = np.zeros(n_particles)
        x = x @ A.T + c + rng.standard_normal((n_particles, K)) @ L.T
    summarize(N)
    return ParticleEstimate(mean=mean, std_error=se, ess=ess, degenerate=every_step)
