"""Processes that are affine in the Gaussian noise driving the market.

Every process in the linear-quadratic game (signal, prices, inventories and
the equilibrium strategies themselves) is an affine function of the vector of
standard normal draws used to simulate one path.  Storing that affine map
instead of sampled values makes conditional expectations exact: conditioning
on the full filtration drops the columns of draws not yet revealed, and
conditioning on the price filtration is an orthogonal projection in draw space.

Array convention: time-indexed arrays have shape ``(..., N + 1, K)``.  For an
:class:`AffineProcess` the leading axis runs over ``[1, xi_1, ..., xi_n]``.
"""

from __future__ import annotations

import numpy as np


def forward_integral(x, dt):
    """Left-endpoint running integral: out_k = sum_{i<k} x_i dt."""
    out = np.zeros_like(x)
    np.cumsum(x[..., :-1, :] * dt, axis=-2, out=out[..., 1:, :])
    return out


def backward_integral(x, dt):
    """Left-endpoint tail integral: out_k = sum_{k<=i<N} x_i dt (out_N = 0)."""
    out = np.zeros_like(x)
    tail = np.flip(x[..., :-1, :], axis=-2) * dt
    out[..., :-1, :] = np.flip(np.cumsum(tail, axis=-2), axis=-2)
    return out


def at_terminal(x):
    """Broadcast the value at the last node to every node."""
    return np.broadcast_to(x[..., -1:, :], x.shape).copy()


def apply_matrix(M, x):
    """Left-multiply each K-vector by M (K x K) or by per-node matrices (N+1, K, K)."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 2:
        return x @ M.T
    return np.einsum("nij,...nj->...ni", M, x)


def h2_norm_sq(values, dt):
    """Per-path left-endpoint H^2 norm squared: sum_{k<N} |x_k|^2 dt."""
    return np.sum(values[..., :-1, :] ** 2, axis=(-2, -1)) * dt


class AffineProcess:
    """A K-vector process X_k = c_k + L_k xi on the time grid.

    ``coef`` has shape ``(1 + n_noise, N + 1, K)``; row 0 holds the mean.
    """

    __array_priority__ = 100

    def __init__(self, coef):
        self.coef = np.asarray(coef, dtype=float)

    @classmethod
    def zeros(cls, n_noise, n_nodes, K):
        return cls(np.zeros((1 + n_noise, n_nodes, K)))

    @classmethod
    def deterministic(cls, values, n_noise):
        values = np.asarray(values, dtype=float)
        coef = np.zeros((1 + n_noise,) + values.shape)
        coef[0] = values
        return cls(coef)

    @property
    def mean(self):
        return self.coef[0]

    @property
    def loadings(self):
        return self.coef[1:]

    @property
    def shape(self):
        return self.coef.shape

    def _wrap(self, coef):
        return AffineProcess(coef)

    def __add__(self, other):
        if isinstance(other, AffineProcess):
            return self._wrap(self.coef + other.coef)
        out = self.coef.copy()
        out[0] = out[0] + other
        return self._wrap(out)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return self._wrap(-self.coef)

    def __mul__(self, c):
        if isinstance(c, AffineProcess):
            raise TypeError("product of two affine processes is not affine")
        c = np.asarray(c, dtype=float)
        if c.ndim == 1 and c.shape[0] == self.coef.shape[1]:
            c = c[:, None]
        return self._wrap(self.coef * c)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / np.asarray(c, dtype=float))

    def matmul(self, M):
        return self._wrap(apply_matrix(M, self.coef))

    def forward_integral(self, dt):
        return self._wrap(forward_integral(self.coef, dt))

    def backward_integral(self, dt):
        return self._wrap(backward_integral(self.coef, dt))

    def terminal(self):
        return self._wrap(at_terminal(self.coef))

    def values(self, draws):
        """Evaluate on sampled draws (n_paths, n_noise) -> (n_paths, N+1, K)."""
        n1, n_nodes, K = self.coef.shape
        flat = self.coef.reshape(n1, -1)
        out = draws @ flat[1:] + flat[0]
        return out.reshape(len(draws), n_nodes, K)

    def second_moment(self, gram):
        """Per-node sample second moment sum_j E|X_k^j|^2 under a draw Gram matrix."""
        return np.einsum("ikq,ij,jkq->k", self.coef, gram, self.coef)

    def allclose(self, other, atol=1e-12):
        return np.allclose(self.coef, other.coef, atol=atol, rtol=0.0)

    def __repr__(self):
        n1, n_nodes, K = self.coef.shape
        return f"AffineProcess(n_noise={n1 - 1}, nodes={n_nodes}, K={K})"
