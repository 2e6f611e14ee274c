"""Model constants, validity checks and the contraction constant."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy.linalg import expm

TOL = 1e-10

_MATRIX_FIELDS = ("a", "b", "h", "p", "phi", "psi", "rB", "rI")


def _frozen(x, shape=None, name="value"):
    arr = np.array(x, dtype=float)
    if shape is not None:
        if arr.ndim == 0 and len(shape) == 2 and shape[0] == shape[1] == 1:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 0 and len(shape) == 1 and shape[0] == 1:
            arr = arr.reshape(1)
        if arr.shape != tuple(shape):
            raise ValueError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SignalParams:
    """Ornstein-Uhlenbeck law of the drift signal alpha.

    d alpha = kappa (theta - alpha) dt + sigma_alpha dW', alpha_0 ~ N(alpha0_mean, alpha0_var).
    """

    kappa: np.ndarray
    theta: np.ndarray
    sigma_alpha: np.ndarray
    alpha0_mean: np.ndarray
    alpha0_var: np.ndarray

    @classmethod
    def build(cls, K, kappa, theta, sigma_alpha, alpha0_mean, alpha0_var):
        return cls(
            kappa=_frozen(kappa, (K, K), "kappa"),
            theta=_frozen(theta, (K,), "theta"),
            sigma_alpha=_frozen(sigma_alpha, (K, K), "sigma_alpha"),
            alpha0_mean=_frozen(alpha0_mean, (K,), "alpha0_mean"),
            alpha0_var=_frozen(alpha0_var, (K, K), "alpha0_var"),
        )

    def to_dict(self):
        return {f.name: getattr(self, f.name).tolist() for f in fields(self)}


@dataclass(frozen=True)
class ModelParams:
    K: int
    D: int
    T: float
    a: np.ndarray
    b: np.ndarray
    h: np.ndarray
    p: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    rB: np.ndarray
    rI: np.ndarray
    q_B0: np.ndarray
    q_I0: np.ndarray
    x_B0: float
    x_I0: float
    y0: np.ndarray
    sigma: np.ndarray
    signal: SignalParams
    z0: np.ndarray = field(default=None)

    @classmethod
    def build(cls, K=1, D=1, T=1.0, *, a, b, h=0.0, p=0.0, phi=0.0, psi=0.0,
              rB=0.0, rI=0.0, q_B0=0.0, q_I0=0.0, x_B0=0.0, x_I0=0.0, y0=0.0,
              sigma, signal, z0=0.0):
        """Construct from nested lists or scalars.

        Scalars are broadcast to ``c * I`` for matrices and ``c * ones`` for
        vectors, which keeps one-asset configurations short.
        """
        K, D = int(K), int(D)

        def mat(v, name, shape=(K, K)):
            arr = np.asarray(v, dtype=float)
            if arr.ndim == 0 and shape[0] == shape[1]:
                arr = float(arr) * np.eye(shape[0])
            elif arr.ndim == 0:
                arr = np.full(shape, float(arr))
            return _frozen(arr, shape, name)

        def vec(v, name):
            arr = np.asarray(v, dtype=float)
            if arr.ndim == 0:
                arr = np.full(K, float(arr))
            return _frozen(arr, (K,), name)

        if isinstance(signal, dict):
            signal = SignalParams.build(
                K,
                mat(signal.get("kappa", 0.0), "kappa"),
                vec(signal.get("theta", 0.0), "theta"),
                mat(signal.get("sigma_alpha", 0.0), "sigma_alpha"),
                vec(signal.get("alpha0_mean", 0.0), "alpha0_mean"),
                mat(signal.get("alpha0_var", 0.0), "alpha0_var"),
            )
        return cls(
            K=K, D=D, T=float(T),
            a=mat(a, "a"), b=mat(b, "b"), h=mat(h, "h"), p=mat(p, "p"),
            phi=mat(phi, "phi"), psi=mat(psi, "psi"), rB=mat(rB, "rB"), rI=mat(rI, "rI"),
            q_B0=vec(q_B0, "q_B0"), q_I0=vec(q_I0, "q_I0"),
            x_B0=float(x_B0), x_I0=float(x_I0),
            y0=vec(y0, "y0"), sigma=mat(sigma, "sigma", (K, D)),
            signal=signal, z0=vec(z0, "z0"),
        )

    def __post_init__(self):
        if self.z0 is None:
            object.__setattr__(self, "z0", _frozen(np.zeros(self.K)))

    def with_updates(self, **changes):
        """Copy with some fields replaced; scalar matrix values are broadcast."""
        d = self.to_dict()
        d.update(changes)
        return ModelParams.build(**d)

    def to_dict(self):
        out = {"K": self.K, "D": self.D, "T": self.T}
        for name in _MATRIX_FIELDS + ("q_B0", "q_I0", "y0", "z0", "sigma"):
            out[name] = getattr(self, name).tolist()
        out["x_B0"] = self.x_B0
        out["x_I0"] = self.x_I0
        out["signal"] = self.signal.to_dict()
        return out

    @property
    def S0(self):
        return self.y0 + self.z0


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        if not self.T > 0:
            raise ValueError("T must be positive")

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def times(self):
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    magnitude: float
    message: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c.message for c in self.checks if not c.passed]

    def to_dict(self):
        return {
            "passed": self.passed,
            "checks": [
                {"name": c.name, "passed": c.passed, "magnitude": c.magnitude, "message": c.message}
                for c in self.checks
            ],
        }


class InvalidParamsError(ValueError):
    pass


def op_norm(A):
    """Operator norm induced by the Euclidean norm (largest singular value)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return float(np.linalg.norm(A, 2)) if A.size else 0.0


def _min_sym_eig(A):
    S = 0.5 * (A + A.T)
    return float(np.linalg.eigvalsh(S).min())


def _asym(A):
    return float(np.max(np.abs(A - A.T))) if A.size else 0.0


def validate_params(params: ModelParams) -> ValidationReport:
    checks = []

    def add(name, ok, mag, msg):
        checks.append(Check(name, bool(ok), float(mag), "" if ok else msg))

    finite = all(np.all(np.isfinite(getattr(params, n))) for n in _MATRIX_FIELDS)
    add("finite matrices", finite, 0.0 if finite else np.inf, "non-finite model matrix")
    add("T positive", params.T > 0 and np.isfinite(params.T), params.T, "T must be positive")
    if not finite:
        return ValidationReport(tuple(checks))

    for name in ("a", "b"):
        A = getattr(params, name)
        asym, lam = _asym(A), _min_sym_eig(A)
        add(f"{name} symmetric", asym <= TOL, asym, f"{name} not symmetric")
        add(f"{name} positive definite", lam > TOL, lam, f"{name} not positive definite")
    for name in ("h", "p", "phi", "psi", "rB", "rI"):
        A = getattr(params, name)
        asym, lam = _asym(A), _min_sym_eig(A)
        add(f"{name} symmetric", asym <= TOL, asym, f"{name} not symmetric")
        add(f"{name} positive semi-definite", lam >= -TOL, lam,
            f"{name} not positive semi-definite")

    comm = op_norm(params.p @ params.h - params.h @ params.p)
    add("p,h commute", comm <= TOL, comm, "p,h do not commute")
    lam = _min_sym_eig(params.phi - 0.5 * params.h)
    add("phi - h/2 positive semi-definite", lam >= -TOL, lam,
        "phi - h/2 not positive semi-definite")

    sig_ok = bool(np.all(np.isfinite(params.sigma)))
    add("sigma finite", sig_ok, 0.0 if sig_ok else np.inf, "sigma has non-finite entries")

    s = params.signal
    sig_finite = all(np.all(np.isfinite(getattr(s, f.name))) for f in fields(s))
    add("signal finite", sig_finite, 0.0, "signal parameters not finite")
    if sig_finite:
        re = float(np.linalg.eigvals(s.kappa).real.min())
        add("kappa eigenvalues nonnegative real part", re >= -TOL, re,
            "kappa has eigenvalue with negative real part")
        for name in ("sigma_alpha", "alpha0_var"):
            A = getattr(s, name)
            asym, lam = _asym(A), _min_sym_eig(A)
            add(f"{name} symmetric", asym <= TOL, asym, f"{name} not symmetric")
            add(f"{name} positive semi-definite", lam >= -TOL, lam,
                f"{name} not positive semi-definite")
    return ValidationReport(tuple(checks))


def require_valid(params: ModelParams):
    report = validate_params(params)
    if not report.passed:
        raise InvalidParamsError("; ".join(report.failures))
    return params


def contraction_terms(params: ModelParams):
    """The five T-independent branches whose maximum, times T^2, is C(T)."""
    ai = op_norm(np.linalg.inv(params.a))
    bi = op_norm(np.linalg.inv(params.b))
    phi, h, psi, p = (op_norm(params.phi), op_norm(params.h),
                      op_norm(params.psi), op_norm(params.p))
    rB, rI = op_norm(params.rB), op_norm(params.rI)
    return np.array([
        ai**2 * (2 * phi + h) ** 2 + 0.5 * (bi**2 + 1) * h**2 + 1,
        ai**2 * (2 * phi + 2 * h) ** 2 + 4 * bi**2 * psi**2 + 1.5,
        0.5 * p**2 * (ai**2 + bi**2),
        0.5 * ai**2 * (h * p + 2 * rB) ** 2,
        2 * bi**2 * rI**2,
    ])


def contraction_constant(params: ModelParams) -> float:
    require_valid(params)
    return float(params.T**2 * contraction_terms(params).max())


def matrix_exp(A, t=1.0):
    """e^{tA} by scaling and squaring."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if not np.all(np.isfinite(A)) or not np.isfinite(t):
        raise ValueError("matrix_exp requires finite input")
    return expm(t * A)


def matrix_exp_grid(A, times):
    """Stack of e^{t_k A} for every t_k in ``times``; shape (len(times), K, K)."""
    return np.stack([matrix_exp(A, t) for t in np.asarray(times, dtype=float)])


__all__ = [
    "ModelParams", "SignalParams", "TimeGrid", "ValidationReport", "Check",
    "InvalidParamsError", "validate_params", "require_valid", "contraction_terms",
    "contraction_constant", "matrix_exp", "matrix_exp_grid", "op_norm",
]
