import json
import subprocess
import sys

import numpy as np
import pytest

from cfpanel import __version__
from cfpanel.cli import CONVENTIONS, LOCK_NAME, run
from cfpanel.dgp import DGPParams, simulate_panel


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("inputs")
    for model, seed in (("cf", 1), ("ar1", 2), ("event", 3), ("lifetimes", 4)):
        assert run(["simulate", "--model", model, "--seed", str(seed), "--out", str(d / model)]) == 0
    return {
        "cf": d / "cf" / "panel.csv",
        "ar1": d / "ar1" / "panel.csv",
        "event": d / "event" / "panel.csv",
        "lifetimes": d / "lifetimes" / "lifetimes.csv",
    }


def _report(out):
    return json.loads((out / "report.json").read_text())


def _commands(inputs):
    return {
        "first-stage": ["--input", str(inputs["cf"])],
        "cf-poisson": ["--input", str(inputs["cf"]), "--reps", "100", "--seed", "5"],
        "event-study": ["--input", str(inputs["event"])],
        "survival": ["--input", str(inputs["lifetimes"])],
        "gmm": ["--input", str(inputs["ar1"]), "--collapse-instruments"],
        "simulate": ["--model", "cf", "--seed", "9"],
        "monte-carlo": ["--pipeline", "gmm", "--reps", "50", "--seed", "2"],
    }


@pytest.mark.parametrize(
    "sub", ["first-stage", "cf-poisson", "event-study", "survival", "gmm", "simulate", "monte-carlo"]
)
def test_subcommand_artifacts_are_byte_identical(sub, inputs, tmp_path):
    args = _commands(inputs)[sub]
    assert run([sub, *args, "--out", str(tmp_path / "a")]) == 0
    assert run([sub, *args, "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    assert "report.json" in files and "run.json" in files and LOCK_NAME not in files
    assert any(f.endswith(".csv") for f in files)
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    report = _report(tmp_path / "a")
    assert report["conventions"] == json.loads(json.dumps(CONVENTIONS))
    manifest = json.loads((tmp_path / "a" / "run.json").read_text())
    assert manifest["version"] == __version__
    assert len(manifest["config_sha256"]) == 64
    assert set(manifest["artifacts"]) == set(files) - {"run.json"}


def test_simulate_then_cf_poisson(inputs, tmp_path):
    assert run(["cf-poisson", "--input", str(inputs["cf"]), "--out", str(tmp_path)]) == 0
    r = _report(tmp_path)
    assert np.isfinite(r["beta"])
    assert isinstance(r["endogeneity_test"]["reject_exogeneity"], bool)
    assert "instrument_f" in r["first_stage"]


def test_figures_written(inputs, tmp_path):
    run(["event-study", "--input", str(inputs["event"]), "--out", str(tmp_path / "e")])
    run(["survival", "--input", str(inputs["lifetimes"]), "--out", str(tmp_path / "s")])
    for f in (tmp_path / "e" / "event_curve.svg", tmp_path / "s" / "survival.svg"):
        text = f.read_text()
        assert text.startswith("<svg") and text.rstrip().endswith("</svg>")


def test_unknown_column_exits_1(inputs, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"spec": {"outcome": "trials", "endogenous": "log_sales", "instruments": ["nope"]}}))
    code = run(["cf-poisson", "--input", str(inputs["cf"]), "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 1
    first = capsys.readouterr().err.splitlines()[0]
    assert first.startswith("cfpanel-error code=1 kind=config reason=") and "'nope'" in first


def test_unbalanced_input_exits_2(inputs, tmp_path, capsys):
    lines = inputs["cf"].read_text().splitlines()
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines[:5] + lines[6:]) + "\n")
    assert run(["first-stage", "--input", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "unbalanced panel" in capsys.readouterr().err.splitlines()[0]


def test_collinear_controls_exit_3(tmp_path, capsys):
    p = simulate_panel(DGPParams(n_entities=30, seed=1))
    p = p.with_columns(x2=2 * p["x1"])
    src = tmp_path / "p.csv"
    p.to_csv(src)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"spec": {"outcome": "trials", "endogenous": "log_sales",
                                        "instruments": ["recalls_norm"], "controls": ["x1", "x2"]}}))
    assert run(["cf-poisson", "--input", str(src), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "kind=numerical" in capsys.readouterr().err


def test_missing_input_and_bad_flags_exit_1(tmp_path):
    assert run(["first-stage", "--input", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 1
    assert run(["first-stage", "--out", str(tmp_path)]) == 1
    assert run(["gmm", "--window", "2010:2005", "--input", "x", "--out", str(tmp_path)]) == 1
    assert run(["bogus"]) == 1


def test_flags_override_config(inputs, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"alpha": 0.1, "window": "2004:2009"}))
    out = tmp_path / "o"
    assert run(["first-stage", "--input", str(inputs["cf"]), "--config", str(cfg), "--alpha", "0.2",
                "--window", "2005:2010", "--out", str(out)]) == 0
    manifest = json.loads((out / "run.json").read_text())
    assert manifest["config"]["alpha"] == 0.2
    assert manifest["config"]["window"] == [2005, 2010]
    assert _report(out)["first_stage"]["periods"] == [2005, 2010]


def test_lockfile_blocks_concurrent_run(inputs, tmp_path):
    (tmp_path / LOCK_NAME).write_text("123")
    assert run(["first-stage", "--input", str(inputs["cf"]), "--out", str(tmp_path)]) == 1


def test_monte_carlo_cf_summary(tmp_path):
    assert run(["monte-carlo", "--pipeline", "cf", "--reps", "50", "--out", str(tmp_path)]) == 0
    r = _report(tmp_path)
    assert set(r["coverage95"]) == {"cf", "naive"}
    assert "p_wald" in r["rejection_rates"]


def test_console_script(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "cfpanel.cli", "simulate", "--model", "lifetimes", "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "lifetimes.csv").exists()
