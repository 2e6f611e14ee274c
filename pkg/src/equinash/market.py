"""Path simulation for the signal, prices, impact, inventories and cash."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .gaussian import AffineProcess, apply_matrix, forward_integral
from .model import ModelParams, TimeGrid, matrix_exp, require_valid

THREADS_ENV = "EQUINASH_THREADS"


def thread_count(n_threads=None):
    if n_threads is not None:
        return max(1, int(n_threads))
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def psd_sqrt(S):
    """Symmetric square root of a PSD matrix (tiny negative eigenvalues clipped)."""
    S = 0.5 * (np.asarray(S, dtype=float) + np.asarray(S, dtype=float).T)
    lam, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T


def ou_transition(signal, dt):
    """Exact one-step OU transition alpha' = A alpha + c + L eps, eps ~ N(0, I).

    The noise covariance is obtained with Van Loan's block exponential, which
    stays valid for singular or zero mean-reversion matrices.
    """
    kappa = signal.kappa
    K = kappa.shape[0]
    Sigma = signal.sigma_alpha @ signal.sigma_alpha.T
    block = np.zeros((2 * K, 2 * K))
    block[:K, :K] = kappa
    block[:K, K:] = Sigma
    block[K:, K:] = -kappa.T
    E = expm(block * dt)
    A = E[K:, K:].T
    Qd = A @ E[:K, K:]
    c = (np.eye(K) - A) @ signal.theta
    return A, c, psd_sqrt(Qd)


def draw_normals(n_paths, n_noise, seed, n_threads=None):
    """Standard normal draws with one counter-based stream per path.

    Path i uses Philox keyed by the seed sequence (seed, i), so the draws of
    a path never depend on how paths are split across threads.
    """
    if n_paths <= 0:
        raise ValueError("n_paths must be positive")
    out = np.empty((n_paths, n_noise))

    def fill(lo, hi):
        for i in range(lo, hi):
            ss = np.random.SeedSequence(int(seed), spawn_key=(i,))
            out[i] = np.random.Generator(np.random.Philox(ss)).standard_normal(n_noise)

    workers = thread_count(n_threads)
    bounds = np.linspace(0, n_paths, workers + 1).astype(int)
    if workers == 1:
        fill(0, n_paths)
    else:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda ab: fill(*ab), zip(bounds[:-1], bounds[1:])))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite random draw")
    return out


class LinearMarket:
    """Affine representation of the exogenous processes and both filtrations.

    Draw layout per path: K draws for alpha_0, then for each step j the K
    signal innovations followed by the D Brownian increments (scaled to unit
    variance).
    """

    def __init__(self, params: ModelParams, grid: TimeGrid):
        self.params = params
        self.grid = grid
        K, D, N = params.K, params.D, grid.n_steps
        self.K, self.D, self.N = K, D, N
        self.n_noise = K + N * (K + D)
        dt = grid.dt
        A, c, L = ou_transition(params.signal, dt)
        self.ou = (A, c, L)

        n1 = 1 + self.n_noise
        alpha = np.zeros((n1, N + 1, K))
        alpha[0, 0] = params.signal.alpha0_mean
        alpha[1:1 + K, 0] = psd_sqrt(params.signal.alpha0_var).T
        dz = np.zeros((n1, N + 1, K))
        for j in range(N):
            base = self.step_offset(j)
            alpha[:, j + 1] = alpha[:, j] @ A.T
            alpha[0, j + 1] += c
            alpha[base:base + K, j + 1] += L.T
            dz[:, j] = alpha[:, j] * dt
            dz[base + K:base + K + D, j] += np.sqrt(dt) * params.sigma.T
        self.alpha = AffineProcess(alpha)
        self.dz = AffineProcess(dz)
        z = forward_integral(dz, 1.0)
        z[0] += params.z0
        self.z = AffineProcess(z)

        # revealed[k] = number of coefficient rows measurable at node k
        self.revealed = np.array([1 + K + k * (K + D) for k in range(N + 1)])
        self._f_mask = (np.arange(n1)[:, None] < self.revealed[None, :]).astype(float)

        self._g_mask = (np.arange(N * K)[:, None] < K * np.arange(N + 1)[None, :]).astype(float)
        self._obs_basis = None
        self._alpha_hat = None

    @property
    def obs_basis(self):
        """Orthonormal basis of the price-increment loadings, built on first use.

        Built lazily so that noiseless prices can still be simulated; only
        conditioning on them requires sigma sigma^T to be invertible.
        """
        if self._obs_basis is None:
            H = self.dz.coef[1:, :self.N].reshape(self.n_noise, self.N * self.K)
            Q, r = np.linalg.qr(H)
            d = np.abs(np.diag(r))
            if d.min() < 1e-12 * max(1.0, d.max()):
                raise np.linalg.LinAlgError("observation covariance sigma sigma^T dt is singular")
            self._obs_basis = Q
        return self._obs_basis

    @property
    def alpha_hat(self):
        if self._alpha_hat is None:
            self._alpha_hat = self.cond_G(self.alpha)
        return self._alpha_hat

    def step_offset(self, j):
        """Row index (in coefficient arrays) of the first draw of step j."""
        return 1 + self.K + j * (self.K + self.D)

    def zeros(self):
        return AffineProcess.zeros(self.n_noise, self.N + 1, self.K)

    def deterministic(self, values):
        values = np.broadcast_to(np.asarray(values, dtype=float), (self.N + 1, self.K))
        return AffineProcess.deterministic(values, self.n_noise)

    def cond_F(self, X: AffineProcess) -> AffineProcess:
        """E[X_k | F_k] node by node: drop draws not yet revealed at t_k."""
        return AffineProcess(X.coef * self._f_mask[:, :, None])

    def cond_G(self, X: AffineProcess) -> AffineProcess:
        """E[X_k | G_k] node by node: project onto past price increments."""
        n1, n_nodes, K = X.coef.shape
        Q = self.obs_basis
        flat = X.coef[1:].reshape(self.n_noise, n_nodes * K)
        B = (Q.T @ flat).reshape(-1, n_nodes, K) * self._g_mask[:, :, None]
        out = np.empty_like(X.coef)
        out[0] = X.coef[0]
        out[1:] = (Q @ B.reshape(-1, n_nodes * K)).reshape(self.n_noise, n_nodes, K)
        return AffineProcess(out)

    def is_F_adapted(self, X: AffineProcess, rtol=1e-9):
        excess = X.coef * (1.0 - self._f_mask[:, :, None])
        return float(np.abs(excess).max(initial=0.0)) <= rtol * max(1.0, float(np.abs(X.coef).max(initial=0.0)))

    def is_G_adapted(self, X: AffineProcess, rtol=1e-8):
        diff = self.cond_G(X).coef - X.coef
        return float(np.abs(diff).max(initial=0.0)) <= rtol * max(1.0, float(np.abs(X.coef).max(initial=0.0)))


@dataclass(frozen=True)
class MarketPath:
    W: np.ndarray
    alpha: np.ndarray
    z: np.ndarray
    Y: np.ndarray
    S: np.ndarray
    Q_B: np.ndarray
    Q_I: np.ndarray
    X_B: np.ndarray
    X_I: np.ndarray


class PathEnsemble:
    """Monte Carlo sample of the exogenous noise with its affine market model."""

    def __init__(self, market: LinearMarket, draws, seed, dW, alpha, z):
        self.market = market
        self.params = market.params
        self.grid = market.grid
        self.draws = draws
        self.seed = seed
        self.dW = dW
        self.alpha = alpha
        self.z = z
        self._gram = None
        self._alpha_hat = None

    @property
    def n_paths(self):
        return self.draws.shape[0]

    def with_params(self, params: ModelParams) -> "PathEnsemble":
        """Same draws and exogenous law, different game constants (e.g. another h)."""
        old = self.params
        same = (params.K == old.K and params.D == old.D and params.T == old.T
                and np.array_equal(params.sigma, old.sigma) and np.array_equal(params.z0, old.z0)
                and all(np.array_equal(getattr(params.signal, f), getattr(old.signal, f))
                        for f in ("kappa", "theta", "sigma_alpha", "alpha0_mean", "alpha0_var")))
        if not same:
            raise ValueError("params change the exogenous price/signal law; simulate a new ensemble")
        require_valid(params)
        clone = PathEnsemble(self.market, self.draws, self.seed, self.dW, self.alpha, self.z)
        clone.params = params
        clone._gram, clone._alpha_hat = self._gram, self._alpha_hat
        return clone

    @property
    def gram(self):
        """Sample second-moment matrix of [1, xi]; turns norms into quadratic forms."""
        if self._gram is None:
            X = np.hstack([np.ones((self.n_paths, 1)), self.draws])
            self._gram = X.T @ X / self.n_paths
        return self._gram

    @property
    def alpha_hat(self):
        if self._alpha_hat is None:
            self._alpha_hat = self.values(self.market.alpha_hat)
        return self._alpha_hat

    def values(self, proc):
        if isinstance(proc, AffineProcess):
            return proc.values(self.draws)
        return np.asarray(proc, dtype=float)

    def mc_norm_sq(self, proc: AffineProcess):
        """Monte Carlo H^2 norm squared, identical to averaging sampled paths."""
        per_node = proc.second_moment(self.gram)
        return float(per_node[:-1].sum() * self.grid.dt)

    def market_path(self, i, nu=None, eta=None):
        nu_v = np.zeros((1,) + self.alpha.shape[1:]) if nu is None else self.values(nu)[i:i + 1]
        eta_v = np.zeros_like(nu_v) if eta is None else self.values(eta)[i:i + 1]
        Y = propagate_transient_impact(self.params, self.grid, nu_v)
        QB, QI, XB, XI = propagate_inventories_and_cash(
            self.params, self.grid, nu_v, eta_v, self.z[i:i + 1], Y)
        return MarketPath(W=self.dW[i], alpha=self.alpha[i], z=self.z[i], Y=Y[0],
                          S=Y[0] + self.z[i], Q_B=QB[0], Q_I=QI[0], X_B=XB[0], X_I=XI[0])


def simulate_signal_and_price(params: ModelParams, grid: TimeGrid, n_paths: int, seed: int,
                              n_threads=None) -> PathEnsemble:
    """Simulate alpha by its exact OU transition and z by an Euler step."""
    require_valid(params)
    if not np.isclose(grid.T, params.T, rtol=0, atol=1e-14):
        raise ValueError("grid horizon differs from params.T")
    if n_paths <= 0:
        raise ValueError("n_paths must be positive")
    market = LinearMarket(params, grid)
    draws = draw_normals(n_paths, market.n_noise, seed, n_threads)
    K, D, N, dt = params.K, params.D, grid.n_steps, grid.dt
    A, c, L = market.ou
    steps = draws[:, K:].reshape(n_paths, N, K + D)
    eps, w = steps[:, :, :K], steps[:, :, K:]
    dW = np.sqrt(dt) * w
    alpha = np.empty((n_paths, N + 1, K))
    alpha[:, 0] = params.signal.alpha0_mean + draws[:, :K] @ psd_sqrt(params.signal.alpha0_var).T
    z = np.empty((n_paths, N + 1, K))
    z[:, 0] = params.z0
    for k in range(N):
        alpha[:, k + 1] = alpha[:, k] @ A.T + c + eps[:, k] @ L.T
        z[:, k + 1] = z[:, k] + alpha[:, k] * dt + dW[:, k] @ params.sigma.T
    if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(z))):
        raise FloatingPointError("non-finite simulated path")
    return PathEnsemble(market, draws, seed, dW, alpha, z)


def propagate_transient_impact(params: ModelParams, grid: TimeGrid, nu, y0=None, h=None):
    """Y_k = e^{-t_k p} y + sum_{j<k} e^{(t_j - t_k) p} h nu_j dt.

    Evaluated by the equivalent one-step recursion Y_{k+1} = e^{-p dt}(Y_k + h nu_k dt).
    Accepts sampled arrays ``(..., N+1, K)`` or an :class:`AffineProcess`.
    """
    affine = isinstance(nu, AffineProcess)
    arr = nu.coef if affine else np.asarray(nu, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("strategy has non-finite values")
    init = params.y0 if y0 is None else np.asarray(y0, dtype=float)
    forcing = apply_matrix(params.h if h is None else h, arr) * grid.dt
    E = matrix_exp(-params.p, grid.dt)
    Y = np.empty_like(arr)
    if affine:
        Y[:, 0] = 0.0
        Y[0, 0] = init
    else:
        Y[..., 0, :] = init
    for k in range(grid.n_steps):
        Y[..., k + 1, :] = (Y[..., k, :] + forcing[..., k, :]) @ E.T
    return AffineProcess(Y) if affine else Y


def propagate_inventories_and_cash(params: ModelParams, grid: TimeGrid, nu, eta, z, Y):
    """Euler recursions for both inventories and both cash accounts (sampled paths)."""
    nu, eta, z, Y = (np.asarray(v, dtype=float) for v in (nu, eta, z, Y))
    if not (nu.shape == eta.shape == z.shape == Y.shape):
        raise ValueError(f"shape mismatch: nu {nu.shape}, eta {eta.shape}, z {z.shape}, Y {Y.shape}")
    dt = grid.dt
    Q_B = params.q_B0 + forward_integral(nu - eta, dt)
    Q_I = params.q_I0 + forward_integral(eta, dt)
    S = Y + z
    sell_I = np.einsum("...k,...k->...", S + eta @ params.b.T, eta)
    buy_B = np.einsum("...k,...k->...", S + nu @ params.a.T, nu)
    X_I = params.x_I0 + forward_integral((-sell_I)[..., None], dt)[..., 0]
    X_B = params.x_B0 + forward_integral((sell_I - buy_B)[..., None], dt)[..., 0]
    return Q_B, Q_I, X_B, X_I
