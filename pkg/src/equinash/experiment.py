"""Config ingestion, pipelines for each run mode, and on-disk artifacts."""

from __future__ import annotations

import hashlib
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .criteria import (concavity_probe, deviation_check, gateaux_JB, gateaux_JI,
                       random_direction)
from .filtering import (ProjectionModel, innovation_autocorrelation, kalman_filter,
                        particle_filter_oracle, project_onto_observation)
from .gaussian import h2_norm_sq
from .market import simulate_signal_and_price
from .model import (ModelParams, TimeGrid, contraction_constant, contraction_terms,
                    validate_params)
from .perturbation import (order0_coefficients, perturbation_series, remainder_scaling_study,
                           riccati_f)
from .picard import (contraction_probe, fbsde_consistency_check, solve_fixed_point,
                     solve_fixed_point_krylov)

log = logging.getLogger(__name__)

MODES = ("validate", "simulate", "solve-picard", "solve-perturbation", "verify", "scaling-study")
FLOAT_FMT = "%.17g"

_MODEL_KEYS = {"K", "D", "T", "a", "b", "h", "p", "phi", "psi", "rB", "rI", "q_B0", "q_I0",
               "x_B0", "x_I0", "y0", "z0", "sigma", "signal"}
_REQUIRED_MODEL_KEYS = {"a", "b", "sigma"}
_SIGNAL_KEYS = {"kappa", "theta", "sigma_alpha", "alpha0_mean", "alpha0_var"}


@dataclass
class SolverSettings:
    method: str = "picard"
    tol: float = 1e-6
    max_iter: int = 200
    relaxation: float = 1.0


@dataclass
class RegressionSettings:
    features: list = field(default_factory=lambda: ["z", "alpha_hat"])
    degree: int = 2
    ridge: float = 1e-8


@dataclass
class PerturbationSettings:
    orders: list = field(default_factory=lambda: [0, 1])
    h_ref: float | None = None
    h_grid: list | None = None
    picard_tol: float = 1e-12
    method: str = "recursive"


@dataclass
class VerificationSettings:
    seed: int = 0
    n_directions: int = 20
    n_deviations: int = 10
    deviation_size: float = 0.1
    n_contraction_pairs: int = 100
    n_concavity_pairs: int = 20
    n_riccati: int = 50
    n_particles: int = 100_000


@dataclass
class ExportSettings:
    max_paths: int = 100


_SECTIONS = {
    "solver": SolverSettings,
    "regression": RegressionSettings,
    "perturbation": PerturbationSettings,
    "verification": VerificationSettings,
    "export": ExportSettings,
}
_TOP_KEYS = {"model", "n_steps", "n_paths", "seed", "out", *_SECTIONS}


class ConfigError(ValueError):
    """Config could not be parsed or failed validation; ``errors`` lists every problem."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class ExperimentConfig:
    params: ModelParams
    n_steps: int = 100
    n_paths: int = 10_000
    seed: int = 0
    out: str | None = None
    solver: SolverSettings = field(default_factory=SolverSettings)
    regression: RegressionSettings = field(default_factory=RegressionSettings)
    perturbation: PerturbationSettings = field(default_factory=PerturbationSettings)
    verification: VerificationSettings = field(default_factory=VerificationSettings)
    export: ExportSettings = field(default_factory=ExportSettings)

    @property
    def grid(self):
        return TimeGrid(self.params.T, self.n_steps)

    def h_grid(self):
        pert = self.perturbation
        if pert.h_grid is not None:
            return [float(h) for h in pert.h_grid]
        h_ref = pert.h_ref if pert.h_ref is not None else float(self.params.h[0, 0])
        return [h_ref * 2.0**-j for j in range(5)]

    def to_dict(self):
        d = {"model": self.params.to_dict(), "n_steps": self.n_steps, "n_paths": self.n_paths,
             "seed": self.seed, "out": self.out}
        for name in _SECTIONS:
            d[name] = asdict(getattr(self, name))
        return d

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.canonical_json() == other.canonical_json()


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _section(name, cls, raw, errors):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        errors.append(f"{name}: expected an object")
        return cls()
    defaults = cls()
    known = set(asdict(defaults))
    for key in sorted(set(raw) - known):
        errors.append(f"{name}.{key}: unknown key")
    values = {}
    for key in known & set(raw):
        v, default = raw[key], getattr(defaults, key)
        if isinstance(default, bool) or default is None or isinstance(default, (list, str)):
            values[key] = v
        elif isinstance(default, int) and not _is_int(v):
            errors.append(f"{name}.{key}: expected an integer, got {v!r}")
        elif isinstance(default, float) and not _is_number(v):
            errors.append(f"{name}.{key}: expected a number, got {v!r}")
        else:
            values[key] = type(default)(v)
    return cls(**values)


def config_from_dict(doc) -> ExperimentConfig:
    """Build and validate a config, collecting every problem before raising."""
    errors = []
    if not isinstance(doc, dict):
        raise ConfigError(["top level: expected an object"])
    for key in sorted(set(doc) - _TOP_KEYS):
        errors.append(f"{key}: unknown key")

    model = doc.get("model")
    params = None
    if not isinstance(model, dict):
        errors.append("model: required object is missing")
    else:
        shape = [f"model.{key}: unknown key" for key in sorted(set(model) - _MODEL_KEYS)]
        shape += [f"model.{key}: required key is missing"
                  for key in sorted(_REQUIRED_MODEL_KEYS - set(model))]
        signal = model.get("signal", {})
        if isinstance(signal, dict):
            shape += [f"model.signal.{key}: unknown key" for key in sorted(set(signal) - _SIGNAL_KEYS)]
        else:
            shape.append("model.signal: expected an object")
        errors.extend(shape)
        if not shape:
            try:
                params = ModelParams.build(**{"signal": {}, **model})
            except (TypeError, ValueError) as exc:
                errors.append(f"model: {exc}")
        if params is not None:
            errors.extend(f"model: {msg}" for msg in validate_params(params).failures)

    ints = {}
    for key, default in (("n_steps", 100), ("n_paths", 10_000), ("seed", 0)):
        v = doc.get(key, default)
        if not _is_int(v):
            errors.append(f"{key}: expected an integer, got {v!r}")
        elif key != "seed" and v <= 0:
            errors.append(f"{key}: must be positive")
        elif v < 0:
            errors.append(f"{key}: must be nonnegative")
        ints[key] = v
    out = doc.get("out")
    if out is not None and not isinstance(out, str):
        errors.append("out: expected a string")
    sections = {name: _section(name, cls, doc.get(name), errors) for name, cls in _SECTIONS.items()}

    s = sections["solver"]
    if not s.tol > 0:
        errors.append("solver.tol: must be positive")
    if s.max_iter < 1:
        errors.append("solver.max_iter: must be at least 1")
    if s.method not in ("picard", "krylov"):
        errors.append("solver.method: must be 'picard' or 'krylov'")
    if not 0 < s.relaxation <= 1:
        errors.append("solver.relaxation: must lie in (0, 1]")
    r = sections["regression"]
    if not isinstance(r.features, list) or not all(f in ("z", "alpha_hat", "t") for f in r.features):
        errors.append("regression.features: entries must be 'z', 'alpha_hat' or 't'")
    if r.degree not in (1, 2):
        errors.append("regression.degree: must be 1 or 2")
    pt = sections["perturbation"]
    if not (isinstance(pt.orders, list) and pt.orders and all(_is_int(m) and m >= 0 for m in pt.orders)):
        errors.append("perturbation.orders: expected a nonempty list of nonnegative integers")
    if pt.method not in ("explicit", "recursive"):
        errors.append("perturbation.method: must be 'explicit' or 'recursive'")
    if pt.h_grid is not None and not (isinstance(pt.h_grid, list) and len(pt.h_grid) >= 2
                                      and all(_is_number(h) and h > 0 for h in pt.h_grid)):
        errors.append("perturbation.h_grid: expected at least two positive numbers")
    if pt.h_ref is not None and not (_is_number(pt.h_ref) and pt.h_ref > 0):
        errors.append("perturbation.h_ref: must be a positive number")
    if sections["export"].max_paths < 1:
        errors.append("export.max_paths: must be at least 1")
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(params=params, out=out, **ints, **sections)


def load_config(source) -> ExperimentConfig:
    """Load a JSON config from a path, a JSON string or an already parsed dict."""
    if isinstance(source, dict):
        return config_from_dict(source)
    path = Path(source) if not str(source).lstrip().startswith("{") else None
    text = path.read_text() if path is not None else str(source)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        where = f"{path}:" if path is not None else ""
        raise ConfigError([f"{where}{exc.lineno}:{exc.colno}: {exc.msg}"]) from None
    return config_from_dict(doc)


def baseline_path() -> Path:
    return Path(__file__).with_name("configs") / "baseline.json"


# --- artifacts -------------------------------------------------------------

def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_csv(path, header, rows):
    rows = np.asarray(rows, dtype=float)
    np.savetxt(path, rows.reshape(-1, len(header)), fmt=FLOAT_FMT, delimiter=",",
               header=",".join(header), comments="")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _component_names(prefix, K):
    return [f"{prefix}_{i + 1}" for i in range(K)]


def _path_rows(times, n_paths, *blocks):
    """Stack per-(path, node) rows: path, t, then every block flattened to columns."""
    N1 = len(times)
    path = np.repeat(np.arange(n_paths), N1)[:, None]
    t = np.tile(times, n_paths)[:, None]
    cols = [b.reshape(n_paths * N1, -1) for b in blocks]
    return np.hstack([path, t, *cols])


def export_ensemble(path, ensemble, n_paths, nu=None, eta=None):
    P, times = ensemble.params, ensemble.grid.times
    n = min(n_paths, ensemble.n_paths)
    fields_ = ["alpha", "z", "Y", "S", "Q_B", "Q_I", "X_B", "X_I"]
    per = {f: [] for f in fields_}
    for i in range(n):
        mp = ensemble.market_path(i, nu, eta)
        for f in fields_:
            per[f].append(getattr(mp, f))
    blocks = [np.stack(per[f]) for f in fields_]
    header = ["path", "t"]
    for f in fields_[:-2]:
        header += _component_names(f, P.K)
    header += ["X_B", "X_I"]
    _write_csv(path, header, _path_rows(times, n, *blocks))


def export_filter(path, ensemble):
    P, times = ensemble.params, ensemble.grid.times
    state = kalman_filter(P, ensemble.grid, ensemble.z)
    K = P.K
    N1 = len(times)
    cov = state.cov.reshape(N1, K * K)
    e = np.full((N1, K), np.nan)
    v = np.full((N1, K), np.nan)
    e[:-1] = state.innovations.mean(axis=0)
    v[:-1] = state.innovations.var(axis=0, ddof=1)
    header = (["t"] + [f"cov_{i + 1}_{j + 1}" for i in range(K) for j in range(K)]
              + _component_names("innov_mean", K) + _component_names("innov_var", K))
    _write_csv(path, header, np.column_stack([times, cov, e, v]))
    return state


def export_equilibrium(path, ensemble, nu, eta, n_paths):
    n = min(n_paths, ensemble.n_paths)
    K = ensemble.params.K
    header = ["path", "t"] + _component_names("nu", K) + _component_names("eta", K)
    rows = _path_rows(ensemble.grid.times, n, ensemble.values(nu)[:n], ensemble.values(eta)[:n])
    _write_csv(path, header, rows)


def export_convergence(path, trace):
    header = ["iteration", "delta", "d_nu", "d_eta", "d_Y", "d_Q_B", "d_Q_I"]
    _write_csv(path, header, list(trace.rows()))


def export_series(path, ensemble, series, n_paths):
    n = min(n_paths, ensemble.n_paths)
    times = ensemble.grid.times
    chunks = []
    for m, c in enumerate(series.orders):
        rows = _path_rows(times, n, np.full((n, len(times), 1), m),
                          ensemble.values(c.eta)[:n], ensemble.values(c.nu)[:n])
        chunks.append(rows)
    # order rows by path, then t, then m
    rows = np.vstack(chunks)
    rows = rows[np.lexsort((rows[:, 2], rows[:, 1], rows[:, 0]))]
    _write_csv(path, ["path", "t", "m", "eta", "nu"], rows)


# --- checks ----------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    value: float
    std_error: float
    tolerance: float
    passed: bool

    def to_dict(self):
        return {"name": self.name, "value": float(self.value), "std_error": float(self.std_error),
                "tolerance": float(self.tolerance), "pass": bool(self.passed)}


def _check_le(name, value, tolerance, std_error=0.0):
    return CheckResult(name, float(value), float(std_error), float(tolerance),
                       bool(np.isfinite(value) and value <= tolerance))


def riccati_checks(seed, n=50, T=1.0, n_nodes=201):
    """Residual of f' = -f^2 + k by a five-point stencil on interior nodes."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    d = 1e-3
    t = np.linspace(0, T, n_nodes)[1:-1]
    t = t[(t > 2 * d) & (t < T - 2 * d)]
    worst_ode, worst_term = 0.0, 0.0
    for c, k in rng.uniform(0, 5, size=(n, 2)):
        f = riccati_f(t, c, k, T)
        fp = (-riccati_f(t + 2 * d, c, k, T) + 8 * riccati_f(t + d, c, k, T)
              - 8 * riccati_f(t - d, c, k, T) + riccati_f(t - 2 * d, c, k, T)) / (12 * d)
        worst_ode = max(worst_ode, float(np.abs(fp + f**2 - k).max()))
        worst_term = max(worst_term, abs(float(riccati_f(T, c, k, T)) + c))
    return [_check_le("riccati_ode_residual", worst_ode, 1e-6),
            _check_le("riccati_terminal", worst_term, 1e-12)]


def _norm_with_se(ensemble, proc):
    """sqrt(E ||x||^2_{H^2}) with a delta-method standard error from per-path values."""
    per_path = h2_norm_sq(ensemble.values(proc), ensemble.grid.dt)
    m = float(per_path.mean())
    se = float(per_path.std(ddof=1) / np.sqrt(len(per_path)))
    r = np.sqrt(m)
    return r, (se / (2 * r) if r > 0 else 0.0)


def picard_checks(trace, geometric=True):
    """Convergence, residual and (for plain sweeps) the geometric-rate check."""
    C = trace.contraction_constant
    checks = [
        CheckResult("picard_converged", float(trace.iterations), 0.0, float("nan"),
                    bool(trace.converged)),
        _check_le("picard_final_residual", trace.final_residual, 1e-5),
    ]
    if geometric:
        checks.insert(1, _check_le("picard_fitted_ratio", trace.fitted_ratio(), np.sqrt(C) + 0.05))
    return checks


def _solve(config, ensemble):
    s = config.solver
    if s.method == "krylov":
        return solve_fixed_point_krylov(ensemble, tol=s.tol, max_iter=s.max_iter)
    return solve_fixed_point(ensemble, tol=s.tol, max_iter=s.max_iter, relaxation=s.relaxation)


def verification_checks(config, ensemble, bundle, trace):
    v = config.verification
    P, grid = ensemble.params, ensemble.grid
    dt = grid.dt
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([v.seed, 1])))
    checks = riccati_checks([v.seed, 0], v.n_riccati)

    cp = contraction_probe(ensemble, n_pairs=v.n_contraction_pairs, seed=v.seed)
    checks.append(_check_le("contraction_ratio", cp.max_ratio, cp.contraction_constant + cp.slack))
    checks += picard_checks(trace, config.solver.method == "picard")

    nu, eta = bundle.nu, bundle.eta
    for agent, filt, fn in (("trader", "F", gateaux_JI), ("broker", "G", gateaux_JB)):
        for i in range(v.n_directions):
            r = fn(ensemble, nu, eta, random_direction(ensemble, rng, filt))
            checks.append(CheckResult(f"gateaux_{agent}_{i}", abs(r.value), r.std_error,
                                      r.stationary_tolerance, r.stationary))
            checks.append(CheckResult(f"gateaux_fd_{agent}_{i}", abs(r.value - r.fd_value),
                                      r.diff_std_error, r.tolerance, r.passed))
        for i in range(v.n_deviations):
            d = random_direction(ensemble, rng, filt)
            r = deviation_check(ensemble, nu, eta, d, v.deviation_size, agent)
            checks.append(CheckResult(f"deviation_{agent}_{i}", r.improvement, r.std_error,
                                      3 * r.std_error, r.passed))
        for i in range(v.n_concavity_pairs):
            fixed_f = "G" if agent == "trader" else "F"
            fixed = random_direction(ensemble, rng, fixed_f)
            x, y = random_direction(ensemble, rng, filt), random_direction(ensemble, rng, filt)
            r = concavity_probe(ensemble, fixed, x, y, agent=agent)
            worst = int(np.argmin(np.asarray(r.gap) / (np.asarray(r.std_error) + 1e-300)))
            checks.append(CheckResult(f"concavity_{agent}_{i}", -r.gap[worst], r.std_error[worst],
                                      3 * r.std_error[worst], r.passed))

    # filter against a particle oracle on the first path
    state = kalman_filter(P, grid, ensemble.z[0])
    pf = particle_filter_oracle(P, grid, ensemble.z[0], v.n_particles, seed=v.seed)
    z_scores = np.abs(pf.mean - state.mean) / np.maximum(pf.std_error, 1e-300)
    checks.append(_check_le("filter_particle_gap_in_se", float(z_scores.max()), 5.0))
    ac = innovation_autocorrelation(state, max_lag=5)
    checks.append(_check_le("innovation_autocorrelation", float(np.abs(ac).max()),
                            3 / np.sqrt(grid.n_steps)))

    # node-wise regression realisation of the price projection against the exact filter
    model = ProjectionModel(tuple(config.regression.features), config.regression.degree,
                            config.regression.ridge)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fitted, _ = project_onto_observation(ensemble, ensemble.alpha, model)
    gap = np.sqrt(h2_norm_sq(fitted - ensemble.alpha_hat, dt).mean())
    # OLS with p regressors on n paths misses the exact projection by about sqrt(p/n) residual sd
    resid = np.sqrt(h2_norm_sq(ensemble.alpha - ensemble.alpha_hat, dt).mean())
    tol = 3 * np.sqrt(model.n_regressors / ensemble.n_paths) * resid
    checks.append(_check_le("regression_projection_gap", float(gap), float(tol)))

    # cross-solver agreement without impact
    if P.K == 1 and P.D == 1:
        ens0 = ensemble.with_params(P.with_updates(h=0.0))
        b0, _ = solve_fixed_point(ens0, tol=min(config.solver.tol, 1e-10),
                                  max_iter=max(config.solver.max_iter, 200))
        o0 = order0_coefficients(None, ens0, "explicit")
        for name, a, b in (("nu", b0.nu, o0.nu), ("eta", b0.eta, o0.eta)):
            val, se = _norm_with_se(ens0, a - b)
            checks.append(_check_le(f"cross_solver_h0_{name}", val, 3 * se + 2 * dt, se))

    res = fbsde_consistency_check(ensemble, bundle, residual_tol=max(1e-5, 10 * trace.final_residual))
    for kind, table in (("terminal", res.terminal), ("drift", res.drift)):
        for name, (val, se) in table.items():
            tol = 3 * se + 2 * dt
            checks.append(_check_le(f"fbsde_{kind}_{name}", val, tol, se))
    return checks


# --- orchestration ---------------------------------------------------------

@dataclass
class RunManifest:
    mode: str
    config_hash: str
    version: str
    seed: int
    started: str
    finished: str = ""
    files: dict = field(default_factory=dict)
    passed: bool = True
    failure: str | None = None
    elapsed_seconds: float = 0.0

    def to_dict(self):
        return asdict(self)


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_experiment(config: ExperimentConfig, mode: str, out=None) -> RunManifest:
    """Run one pipeline, write its artifacts plus ``manifest.json`` into ``out``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    out = Path(out if out is not None else (config.out or "."))
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(mode=mode, config_hash=config.digest(), version=__version__,
                           seed=config.seed, started=_now())
    t0 = time.perf_counter()
    written = []

    def emit(name, writer, *args):
        writer(out / name, *args)
        written.append(name)

    C = contraction_constant(config.params)
    report = validate_params(config.params).to_dict()
    report["config"] = config.to_dict()
    report["contraction_constant"] = C
    report["contraction_terms"] = contraction_terms(config.params).tolist()
    report["within_guarantee"] = bool(C < 1)
    emit("validation.json", _write_json, report)
    manifest.passed = bool(report["passed"])

    if mode != "validate":
        log.info("simulating %d paths with %d steps", config.n_paths, config.n_steps)
        ensemble = simulate_signal_and_price(config.params, config.grid, config.n_paths, config.seed)
        n_export = config.export.max_paths
        if mode == "simulate":
            emit("ensemble.csv", export_ensemble, ensemble, n_export)
            emit("filter.csv", export_filter, ensemble)
        elif mode in ("solve-picard", "verify"):
            bundle, trace = _solve(config, ensemble)
            emit("equilibrium.csv", export_equilibrium, ensemble, bundle.nu, bundle.eta, n_export)
            emit("convergence.csv", export_convergence, trace)
            checks = picard_checks(trace, config.solver.method == "picard")
            if not trace.converged:
                manifest.failure = "fixed-point iteration did not converge"
            if mode == "verify":
                if trace.converged:
                    checks = verification_checks(config, ensemble, bundle, trace)
                emit("verification.json", _write_json, [c.to_dict() for c in checks])
            manifest.passed &= all(c.passed for c in checks)
        elif mode == "solve-perturbation":
            M = max(config.perturbation.orders)
            series = perturbation_series(ensemble, M, config.perturbation.method)
            emit("series.csv", export_series, ensemble, series, n_export)
            checks = riccati_checks([config.verification.seed, 0], config.verification.n_riccati)
            emit("verification.json", _write_json, [c.to_dict() for c in checks])
            manifest.passed &= all(c.passed for c in checks)
        elif mode == "scaling-study":
            pert = config.perturbation
            h_grid = config.h_grid()
            series = perturbation_series(ensemble, max(pert.orders), pert.method)
            reports = []
            for M in pert.orders:
                log.info("scaling study for M=%d over h=%s", M, h_grid)
                r = remainder_scaling_study(None, ensemble, M, h_grid, method=pert.method,
                                            tol=pert.picard_tol,
                                            max_iter=max(config.solver.max_iter, 500),
                                            series=series)
                reports.append(r.to_dict())
            emit("scaling.json", _write_json, {
                "h_grid": h_grid,
                "contraction_constant": [contraction_constant(config.params.with_updates(h=h))
                                         for h in h_grid],
                "reports": reports,
            })
            manifest.passed &= all(r["passed"] for r in reports)

    manifest.files = {name: _sha256(out / name) for name in written}
    manifest.finished = _now()
    manifest.elapsed_seconds = round(time.perf_counter() - t0, 3)
    _write_json(out / "manifest.json", manifest.to_dict())
    return manifest
