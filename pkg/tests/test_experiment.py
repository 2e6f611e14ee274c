import json
import subprocess
import sys

import numpy as np
import pytest

from equinash.cli import main
from equinash.experiment import ConfigError, config_from_dict, load_config, run_experiment

MINIMAL = {"model": {"T": 0.25, "a": 1.0, "b": 1.0, "sigma": 0.5}}


def small(doc, **top):
    doc = json.loads(json.dumps(doc))
    doc.update({"n_paths": 400, "n_steps": 20}, **top)
    return doc


def test_minimal_document_gets_defaults():
    cfg = load_config(MINIMAL)
    assert (cfg.n_paths, cfg.n_steps, cfg.solver.tol) == (10_000, 100, 1e-6)
    assert cfg.params.K == 1 and cfg.params.h[0, 0] == 0.0


def test_invalid_model_names_the_invariant():
    doc = json.loads(json.dumps(MINIMAL))
    doc["model"]["a"] = -1.0
    with pytest.raises(ConfigError) as exc:
        load_config(doc)
    assert any("a not positive definite" in e for e in exc.value.errors)


def test_every_problem_is_listed():
    doc = json.loads(json.dumps(MINIMAL))
    doc["model"].update(a=-1.0, psi=-2.0, colour="red")
    doc["model"]["signal"] = {"kappa": 1.0, "speed": 2}
    doc.update(n_paths="many", extra=1, solver={"tol": 1e-3, "bogus": 1})
    with pytest.raises(ConfigError) as exc:
        load_config(doc)
    errs = "\n".join(exc.value.errors)
    for needle in ("model.colour", "model.signal.speed", "n_paths", "extra", "solver.bogus"):
        assert needle in errs
    # model validation is skipped while the model block itself is malformed
    doc["model"].pop("colour")
    doc["model"]["signal"].pop("speed")
    with pytest.raises(ConfigError) as exc:
        load_config(doc)
    errs = "\n".join(exc.value.errors)
    assert "a not positive definite" in errs and "psi not positive semi-definite" in errs


def test_parse_errors_carry_line_and_column(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "model": {\n    "a": 1.0,,\n  }\n}\n')
    with pytest.raises(ConfigError, match=r"bad.json:3:14"):
        load_config(bad)


def test_round_trip_is_lossless(baseline_config):
    again = load_config(json.dumps(baseline_config.to_dict()))
    assert again == baseline_config
    assert again.digest() == baseline_config.digest()


def test_baseline_is_inside_the_guarantee(baseline_config):
    from equinash.model import contraction_constant
    assert contraction_constant(baseline_config.params) < 1
    assert baseline_config.h_grid() == [0.8, 0.4, 0.2, 0.1, 0.05]


def test_validate_mode_writes_only_the_report(tmp_path, baseline_config):
    man = run_experiment(baseline_config, "validate", tmp_path)
    assert man.passed and set(man.files) == {"validation.json"}
    rep = json.loads((tmp_path / "validation.json").read_text())
    assert rep["passed"] and rep["within_guarantee"]
    assert load_config(rep["config"]) == baseline_config
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config_hash"] == baseline_config.digest()


def test_zero_problem_writes_zero_strategies(tmp_path):
    doc = small({"model": {"T": 0.25, "a": 1.0, "b": 1.0, "h": 0.1, "p": 1.0, "phi": 0.5,
                           "sigma": 0.5, "signal": {"kappa": 1.0}}})
    man = run_experiment(config_from_dict(doc), "solve-picard", tmp_path)
    assert man.passed
    eq = np.loadtxt(tmp_path / "equilibrium.csv", delimiter=",", skiprows=1)
    assert eq.shape == (100 * 21, 4)
    assert np.all(eq[:, 2:] == 0)
    header = (tmp_path / "equilibrium.csv").read_text().splitlines()[0]
    assert header == "path,t,nu_1,eta_1"


def test_simulate_exports(tmp_path, baseline_doc):
    cfg = config_from_dict(small(baseline_doc, export={"max_paths": 3}))
    man = run_experiment(cfg, "simulate", tmp_path)
    assert set(man.files) == {"validation.json", "ensemble.csv", "filter.csv"}
    lines = (tmp_path / "ensemble.csv").read_text().splitlines()
    assert lines[0] == "path,t,alpha_1,z_1,Y_1,S_1,Q_B_1,Q_I_1,X_B,X_I"
    assert len(lines) == 1 + 3 * 21
    rows = np.loadtxt(tmp_path / "ensemble.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(rows[:, 5], rows[:, 4] + rows[:, 3])
    filt = (tmp_path / "filter.csv").read_text().splitlines()
    assert filt[0] == "t,cov_1_1,innov_mean_1,innov_var_1"


def test_series_export_layout(tmp_path, baseline_doc):
    cfg = config_from_dict(small(baseline_doc, export={"max_paths": 2}))
    run_experiment(cfg, "solve-perturbation", tmp_path)
    rows = np.loadtxt(tmp_path / "series.csv", delimiter=",", skiprows=1)
    assert rows.shape == (2 * 21 * 2, 5)
    np.testing.assert_array_equal(rows[:4, 2], [0, 1, 0, 1])


def test_nonconvergence_is_recorded(tmp_path, baseline_doc):
    cfg = config_from_dict(small(baseline_doc, solver={"max_iter": 2}))
    with pytest.warns(RuntimeWarning):
        man = run_experiment(cfg, "solve-picard", tmp_path)
    assert not man.passed and man.failure
    assert "equilibrium.csv" in man.files


def test_manifest_lists_every_file_with_digest(tmp_path, baseline_doc):
    import hashlib
    cfg = config_from_dict(small(baseline_doc))
    man = run_experiment(cfg, "solve-picard", tmp_path)
    written = {p.name for p in tmp_path.iterdir()} - {"manifest.json"}
    assert set(man.files) == written
    for name, digest in man.files.items():
        assert hashlib.sha256((tmp_path / name).read_bytes()).hexdigest() == digest


def test_identical_runs_are_byte_identical(tmp_path, baseline_doc):
    cfg = config_from_dict(small(baseline_doc))
    a = run_experiment(cfg, "solve-picard", tmp_path / "a")
    b = run_experiment(cfg, "solve-picard", tmp_path / "b")
    assert a.files == b.files


def test_unknown_mode(tmp_path, baseline_config):
    with pytest.raises(ValueError):
        run_experiment(baseline_config, "plot", tmp_path)


def test_cli_exit_codes_and_seed_override(tmp_path, baseline_doc, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(small(baseline_doc)))
    assert main(["solve-picard", "--config", str(path), "--out", str(tmp_path / "o"),
                 "--seed", "3"]) == 0
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"] == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"a": 0.0, "b": 1.0, "sigma": 1.0}}))
    assert main(["validate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "a not positive definite" in capsys.readouterr().err
    failing = tmp_path / "failing.json"
    failing.write_text(json.dumps(small(baseline_doc, solver={"max_iter": 1})))
    with pytest.warns(RuntimeWarning):
        assert main(["solve-picard", "--config", str(failing), "--out", str(tmp_path / "f")]) == 1


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "equinash.cli", "--help"], capture_output=True,
                         text=True, check=True)
    assert "EQUINASH_THREADS" in out.stdout and "scaling-study" in out.stdout
