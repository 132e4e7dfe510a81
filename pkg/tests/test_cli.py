import csv
import json
import subprocess
import sys

import pytest

from gqnepr.cli import main

from helpers import tree_digest, write_config


def run(*argv):
    return main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def simulated(tmp_path):
    out = tmp_path / "sim"
    cfg = write_config(tmp_path / "sim.toml")
    assert run("simulate", cfg, "--out", out) == 0
    return out


def test_simulate_file_contract(simulated):
    lat = read_rows(simulated / "latent.csv")
    obs = read_rows(simulated / "observations.csv")
    truth = read_rows(simulated / "truth.csv")
    assert len(lat) == len(obs) == 16 * 5
    assert {r["time"] for r in obs} == {str(t) for t in range(1, 6)}
    assert {r["time"] for r in truth} == {"6"} and len(truth) == 16
    assert list(truth[0]) == ["site_id", "time", "latent", "value"]
    man = json.loads((simulated / "manifest_simulate.json").read_text())
    assert man["seed"] == 11 and "config_hash" in man and "numpy" in man["versions"]


def test_full_size_simulate_shape(tmp_path):
    cfg = write_config(tmp_path / "c.toml", domain={"rows": 10, "cols": 10}, simulation={"T": 14})
    assert run("simulate", cfg, "--out", tmp_path / "o") == 0
    rows = read_rows(tmp_path / "o" / "latent.csv")
    assert len({r["site_id"] for r in rows}) == 100 and len({r["time"] for r in rows}) == 14


def test_horizon_zero_writes_no_truth(tmp_path):
    cfg = write_config(tmp_path / "c.toml", simulation={"horizon": 0})
    assert run("simulate", cfg, "--out", tmp_path / "o") == 0
    assert not (tmp_path / "o" / "truth.csv").exists()


def test_config_errors_exit_2(tmp_path, capsys):
    assert run("simulate", tmp_path / "missing.toml") == 2
    cfg = write_config(tmp_path / "c.toml", holdout={"fraction": 1.5})
    assert run("simulate", cfg) == 2
    cfg = write_config(tmp_path / "d.toml", family="negbin")
    assert run("simulate", cfg) == 2
    assert run("fit", write_config(tmp_path / "e.toml")) == 2
    assert "config error" in capsys.readouterr().err


def test_runtime_error_exit_3(tmp_path, simulated):
    # more spatial knots than sites leaves the basis rank deficient
    cfg = write_config(tmp_path / "c.toml", data_dir=simulated, basis={"r_s": 30, "r_t": 6})
    assert run("fit", cfg, "--out", tmp_path / "fit") == 3


def test_fit_outputs_and_absent_fields(tmp_path):
    cfg = write_config(tmp_path / "s.toml", simulation={"horizon": 0})
    run("simulate", cfg, "--out", tmp_path / "sim")
    cfg = write_config(tmp_path / "f.toml", data_dir=tmp_path / "sim", simulation={"horizon": 0})
    assert run("fit", cfg, "--out", tmp_path / "fit") == 0
    rep = json.loads((tmp_path / "fit" / "report.json").read_text())
    assert "out_of_sample_mspe" not in rep and "forecast_error" not in rep
    assert rep["in_sample_mspe"] >= 0 and rep["crps"] >= 0
    resid = read_rows(tmp_path / "fit" / "residuals.csv")
    assert len(resid) == 16 * 5 and {r["split"] for r in resid} == {"train"}
    draws = read_rows(tmp_path / "fit" / "draws.csv")
    assert {r["block"] for r in draws} >= {"xi", "beta", "eta", "q"}


def test_fit_with_holdout_and_forecast(tmp_path, simulated):
    cfg = write_config(tmp_path / "f.toml", data_dir=simulated, holdout={"fraction": 0.25})
    assert run("fit", cfg, "--out", tmp_path / "fit") == 0
    rep = json.loads((tmp_path / "fit" / "report.json").read_text())
    assert rep["n_holdout"] == 4 * 5 and rep["n_train"] == 12 * 5
    assert "out_of_sample_mspe" in rep and rep["forecast_by_step"].keys() == {"1"}
    splits = [r["split"] for r in read_rows(tmp_path / "fit" / "residuals.csv")]
    assert splits.count("holdout") == 20 and splits.count("forecast") == 16


def test_bernoulli_fit_reports_auc(tmp_path):
    over = dict(family="bernoulli", simulation={"study": "bernoulli", "beta": [-0.5]})
    run("simulate", write_config(tmp_path / "s.toml", **over), "--out", tmp_path / "sim")
    cfg = write_config(tmp_path / "f.toml", data_dir=tmp_path / "sim", epr={"alpha_xi": 0.5}, **over)
    assert run("fit", cfg, "--out", tmp_path / "fit") == 0
    rep = json.loads((tmp_path / "fit" / "report.json").read_text())
    assert 0.0 <= rep["auc"] <= 1.0


def test_calibrate_then_fit_reuses_artifacts(tmp_path, simulated):
    cfg = write_config(tmp_path / "c.toml")
    assert run("calibrate", cfg, "--out", tmp_path / "cal") == 0
    direct = write_config(tmp_path / "d.toml", data_dir=simulated)
    reuse = write_config(tmp_path / "r.toml", data_dir=simulated, data={"calibration": str(tmp_path / "cal")})
    assert run("fit", direct, "--out", tmp_path / "a") == 0
    assert run("fit", reuse, "--out", tmp_path / "b") == 0
    a = json.loads((tmp_path / "a" / "report.json").read_text())
    b = json.loads((tmp_path / "b" / "report.json").read_text())
    assert a["in_sample_mspe"] == pytest.approx(b["in_sample_mspe"], rel=1e-9)


def test_compare_columns_and_identical_runs(tmp_path):
    over = dict(simulation={"horizon": 3})
    run("simulate", write_config(tmp_path / "s.toml", **over), "--out", tmp_path / "sim")
    dirs = []
    for target in ("gqn", "var1", "gqn"):
        d = tmp_path / f"fit_{target}_{len(dirs)}"
        cfg = write_config(tmp_path / f"{d.name}.toml", data_dir=tmp_path / "sim",
                           calibration={"target": target}, **over)
        assert run("fit", cfg, "--out", d) == 0
        dirs.append(d)
    out = tmp_path / "cmp.csv"
    assert run("compare", *dirs, "--out", out) == 0
    rows = read_rows(out)
    assert list(rows[0])[:4] == ["covariance", "1-step", "2-step", "3-step"]
    assert [r["covariance"] for r in rows] == ["gqn", "var1", "gqn"]
    assert rows[0]["in_sample_mspe"] == rows[2]["in_sample_mspe"]


def test_compare_rejects_different_datasets(tmp_path):
    dirs = []
    for seed in (1, 2):
        run("simulate", write_config(tmp_path / f"s{seed}.toml", seed=seed), "--out", tmp_path / f"sim{seed}")
        cfg = write_config(tmp_path / f"f{seed}.toml", data_dir=tmp_path / f"sim{seed}", seed=seed)
        run("fit", cfg, "--out", tmp_path / f"fit{seed}")
        dirs.append(tmp_path / f"fit{seed}")
    assert run("compare", *dirs, "--out", tmp_path / "c.csv") == 3
    assert run("compare", dirs[0], "--out", tmp_path / "c.csv") == 2


def test_rerun_is_byte_identical_and_thread_independent(tmp_path, simulated):
    cfg = write_config(tmp_path / "f.toml", data_dir=simulated, holdout={"fraction": 0.25})
    run("fit", cfg, "--out", tmp_path / "a")
    run("fit", cfg, "--out", tmp_path / "b", "--threads", 3)
    a, b = tree_digest(tmp_path / "a"), tree_digest(tmp_path / "b")
    a.pop("manifest_fit.json"), b.pop("manifest_fit.json")
    assert a == b


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path / "c.toml")
    res = subprocess.run([sys.executable, "-m", "gqnepr", "basis", str(cfg), "--out", str(tmp_path / "b")],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "b" / "basis.csv").exists() and (tmp_path / "b" / "basis.json").exists()
