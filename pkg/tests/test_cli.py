import hashlib
import json

import pytest

from partval.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main

DESIGN = {"n": 800, "seed": 3, "target_fn_rate": 0.1, "target_fp_rate": 0.2}


@pytest.fixture
def design_file(tmp_path):
    p = tmp_path / "design.json"
    p.write_text(json.dumps(DESIGN))
    return p


@pytest.fixture
def simulated(tmp_path, design_file):
    out = tmp_path / "sim"
    assert main(["simulate", "--design", str(design_file), "--out", str(out),
                 "--verbosity", "quiet"]) == EXIT_OK
    return out


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_calibrate_writes_design(tmp_path, design_file):
    out = tmp_path / "cal"
    assert main(["calibrate", "--design", str(design_file), "--out", str(out)]) == EXIT_OK
    d = json.loads((out / "design.json").read_text())
    assert d["tau_fn"] is not None and d["tau_fp"] is not None
    m = _manifest(out)
    assert m["command"] == "calibrate" and m["status"] == "ok"


def test_simulate_outputs_and_hashes(simulated):
    m = _manifest(simulated)
    for name, digest in m["outputs"].items():
        assert hashlib.sha256((simulated / name).read_bytes()).hexdigest() == digest
    header = (simulated / "data.csv").read_text().splitlines()[0]
    assert "y_star" in header
    rates = json.loads((simulated / "rates.json").read_text())
    assert 0 <= rates["fn_rate"] <= 1
    assert "timestamp" not in json.dumps(m)


@pytest.mark.parametrize("est", ["probit_reported", "ppo_mle", "po_mle", "has"])
def test_fit_estimators(tmp_path, simulated, est):
    out = tmp_path / f"fit_{est}"
    code = main(["fit", "--estimator", est, "--data", str(simulated / "data.csv"),
                 "--spec", str(simulated / "spec.json"), "--out", str(out)])
    assert code == EXIT_OK
    fit = json.loads((out / "fit.json").read_text())
    assert fit["converged"]
    assert "marginal_effects" in fit


def test_fit_is_reproducible(tmp_path, simulated):
    args = ["fit", "--estimator", "ppo", "--data", str(simulated / "data.csv"),
            "--spec", str(simulated / "spec.json")]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "fit.json").read_bytes() == (tmp_path / "b" / "fit.json").read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == \
        (tmp_path / "b" / "manifest.json").read_bytes()


def test_usage_errors(tmp_path, simulated):
    assert main(["frobnicate", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["fit", "--estimator", "bogus", "--data", str(simulated / "data.csv"),
                 "--spec", str(simulated / "spec.json"), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["simulate", "--out", str(tmp_path / "y")]) == EXIT_USAGE
    assert main(["mc", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "z")]) \
        == EXIT_USAGE
    assert main(["fit", "--out", str(tmp_path / "w"), "--workers", "0"]) == EXIT_USAGE


def test_data_errors(tmp_path, simulated):
    assert main(["fit", "--estimator", "ppo", "--data", str(tmp_path / "missing.csv"),
                 "--spec", str(simulated / "spec.json"), "--out", str(tmp_path / "a")]) == EXIT_DATA
    text = (simulated / "data.csv").read_text().splitlines()
    header = text[0].split(",")
    row = text[1].split(",")
    row[header.index("y_reported")] = "7"
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join([text[0], ",".join(row)] + text[2:]) + "\n")
    assert main(["fit", "--estimator", "ppo", "--data", str(bad),
                 "--spec", str(simulated / "spec.json"), "--out", str(tmp_path / "b")]) == EXIT_DATA
    unreachable = tmp_path / "u.json"
    unreachable.write_text(json.dumps({"target_fn_rate": 0.0}))
    assert main(["calibrate", "--design", str(unreachable), "--out", str(tmp_path / "c")]) == EXIT_DATA


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == EXIT_OK


def test_mc_byte_identical(tmp_path):
    cfg = tmp_path / "mc.json"
    cfg.write_text(json.dumps({"design": {"target_fn_rate": 0.1, "target_fp_rate": 0.2},
                               "replications": 2, "n": 300,
                               "estimators": ["probit_reported", "ppo_mle"]}))
    for d, w in (("a", "1"), ("b", "2")):
        assert main(["mc", "--config", str(cfg), "--out", str(tmp_path / d), "--workers", w,
                     "--verbosity", "quiet"]) == EXIT_OK
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_bias_command(tmp_path, design_file):
    out = tmp_path / "bias"
    assert main(["bias", "--design", str(design_file), "--estimator", "reported",
                 "--out", str(out), "--oracle-n", "100000", "--verify"]) == EXIT_OK
    rep = json.loads((out / "bias.json").read_text())
    assert len(rep["pseudo_true"]) == 4
    assert rep["identity_residual_relative"] < 0.05
