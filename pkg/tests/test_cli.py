import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hvq import __version__, dynamics
from hvq.cli import main
from hvq.fields import read_snapshot

PROPAGATE = {
    "experiment": "propagate",
    "system": {"metric_inverse": "1", "scalar_potential": "0"},
    "grid": {"axes": [{"min": -10, "max": 10, "points": 256}]},
    "initial": {"amplitude": "exp(-q1^2/4)"},
    "distribution": {"kind": "binary"},
    "numerics": {"dt": 0.01, "t_final": 0.5, "snapshot_every": 10},
    "output": {"directory": "out"},
    "assertions": [{"metric": "norm_drift", "max": 1e-9}],
}


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=2))
    return path


def _with(**changes):
    cfg = json.loads(json.dumps(PROPAGATE))
    for dotted, value in changes.items():
        node = cfg
        *parents, key = dotted.split("__")
        for p in parents:
            node = node[p]
        node[key] = value
    return cfg


def test_version(capsys):
    assert main(["version"]) == 0
    assert capsys.readouterr().out.strip() == f"hvq {__version__}"


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "hvq", "version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout


def test_validate_valid(tmp_path, capsys):
    assert main(["validate", str(_write(tmp_path, PROPAGATE))]) == 0
    assert capsys.readouterr().err == ""


def test_validate_unknown_distribution_kind(tmp_path, capsys):
    assert main(["validate", str(_write(tmp_path, _with(distribution={"kind": "gamma"})))]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "distribution" in err[0]


def test_validate_non_symmetric_metric(tmp_path, capsys):
    cfg = _with(
        system={"coords": ["q1", "q2"], "metric_inverse": [["1", "q1"], ["q2", "1"]]},
        grid={"axes": [{"min": -2, "max": 2, "points": 16}] * 2},
        initial={"amplitude": "exp(-q1^2-q2^2)"},
    )
    assert main(["validate", str(_write(tmp_path, cfg))]) == 2
    assert "(0,1)" in capsys.readouterr().err


def test_negative_dt_names_field(tmp_path, capsys):
    assert main(["run", str(_write(tmp_path, _with(numerics__dt=-0.01)))]) == 2
    err = capsys.readouterr().err
    assert "numerics" in err and "dt" in err
    assert not (tmp_path / "out").exists()


def test_bad_json_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "experiment": "propagate",\n  "grid": ,\n}')
    assert main(["validate", str(path)]) == 2
    assert "line 3" in capsys.readouterr().err


def test_unknown_identifier_diagnostic(tmp_path, capsys):
    assert main(["validate", str(_write(tmp_path, _with(system__scalar_potential="x^2")))]) == 2
    assert "scalar_potential" in capsys.readouterr().err


def test_minimal_propagate_run(tmp_path, capsys):
    assert main(["run", str(_write(tmp_path, PROPAGATE))]) == 0
    out = capsys.readouterr().out
    assert "PASS norm_drift" in out
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert rep["status"] == "ok" and rep["passed"]
    assert rep["metrics"]["norm_drift"] < 1e-9
    assert rep["config"] == PROPAGATE
    assert rep["version"] == __version__ and rep["wall_time_s"] >= 0


def test_manifest_hashes_match(tmp_path):
    assert main(["run", str(_write(tmp_path, PROPAGATE))]) == 0
    outdir = tmp_path / "out"
    rep = json.loads((outdir / "report.json").read_text())
    emitted = {p.relative_to(outdir).as_posix() for p in outdir.rglob("*") if p.is_file()} - {"report.json"}
    assert {m["path"] for m in rep["manifest"]} == emitted
    for m in rep["manifest"]:
        data = (outdir / m["path"]).read_bytes()
        assert m["bytes"] == len(data)
        assert m["sha256"] == hashlib.sha256(data).hexdigest()


def test_failed_assertion_exits_one(tmp_path, capsys):
    cfg = _with(assertions=[{"metric": "norm_drift", "max": -1.0}])
    assert main(["run", str(_write(tmp_path, cfg))]) == 1
    assert "FAIL norm_drift" in capsys.readouterr().out
    assert json.loads((tmp_path / "out" / "report.json").read_text())["passed"] is False


def test_missing_metric_fails(tmp_path):
    assert main(["run", str(_write(tmp_path, _with(assertions=[{"metric": "nope", "max": 1.0}])))]) == 1


def test_measure_angular_binary(tmp_path):
    cfg = {
        "experiment": "measure_angular",
        "grid": {"axes": [{"min": -10, "max": 10, "points": 401}]},
        "initial": {"amplitude": "exp(-q1^2)"},
        "distribution": {"kind": "binary"},
        "measurement": {"g": 1.0, "T": 1.0, "components": [{"l": 2, "re": 1.0, "im": 0.0}]},
        "numerics": {"dt": 0.01, "t_final": 1.0},
        "output": {"directory": "out"},
    }
    assert main(["run", str(_write(tmp_path, cfg))]) == 0
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert rep["metrics"]["inferred_variance"] == 0.0
    assert rep["metrics"]["inferred_mean"] == 2.0


def test_domain_error_exits_two(tmp_path, capsys):
    cfg = _with(system__scalar_potential="log(q1)")
    assert main(["run", str(_write(tmp_path, cfg))]) == 2
    assert "grid index" in capsys.readouterr().err


def test_numerical_abort_exits_three(tmp_path, monkeypatch, capsys):
    real = dynamics.CrankNicolson.step_vec
    calls = {"n": 0}

    def flaky(self, v):
        calls["n"] += 1
        out = real(self, v)
        return out * np.nan if calls["n"] == 15 else out

    monkeypatch.setattr(dynamics.CrankNicolson, "step_vec", flaky)
    assert main(["run", str(_write(tmp_path, PROPAGATE))]) == 3
    err = capsys.readouterr().err
    last = tmp_path / "out" / "last_good.bin"
    assert str(last) in err
    psi, lam, t = read_snapshot(last)
    # snapshots every 10 steps; step 15 fails, so the last good one is t = 0.1
    assert t == pytest.approx(0.1) and np.all(np.isfinite(psi.values))
    assert json.loads((tmp_path / "out" / "report.json").read_text())["status"] == "aborted"


def test_out_override(tmp_path):
    assert main(["run", str(_write(tmp_path, PROPAGATE)), "--out", str(tmp_path / "elsewhere")]) == 0
    assert (tmp_path / "elsewhere" / "report.json").exists()


ENSEMBLE = {
    "experiment": "ensemble",
    "system": {"metric_inverse": "1", "scalar_potential": "q1^2/2"},
    "grid": {"axes": [{"min": -10, "max": 10, "points": 256}]},
    "initial": {"amplitude": "exp(-(q1-1)^2/2)", "phase": "0.5*q1"},
    "distribution": {"kind": "lognormal", "sigma": 0.2},
    "numerics": {"dt": 0.01, "t_final": 0.5, "snapshot_every": 10, "n_lambda_nodes": 8},
    "output": {"directory": "out"},
}


def _outputs(outdir):
    return {p.relative_to(outdir).as_posix(): p.read_bytes() for p in outdir.rglob("*") if p.is_file() and p.name != "report.json"}


def test_outputs_independent_of_thread_count(tmp_path, monkeypatch):
    path = _write(tmp_path, ENSEMBLE)
    got = []
    for threads in ("1", "4"):
        monkeypatch.setenv("HVQ_THREADS", threads)
        outdir = tmp_path / f"t{threads}"
        assert main(["run", str(path), "--out", str(outdir)]) == 0
        got.append(_outputs(outdir))
    assert got[0] and got[0] == got[1]


CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.json"))


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    assert main(["validate", str(path)]) == 0
