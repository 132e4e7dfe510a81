"""Command-line entry point: ``gqnepr {simulate,basis,calibrate,fit,compare}``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .basis import BasisMatrix, read_geojson
from .calibration import CalibratedCovariance, PriorSpec, study_params
from .config import ConfigError, config_hash, load_config
from .dynamics import SpatialDomain
from .epr import Hyperprior
from .pipeline import (FitSettings, build_basis, calibrate_basis, fit_study, load_study, simulate_study,
                       write_latent, write_observations, write_residuals, write_truth)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _versions() -> dict:
    import scipy
    import shapely

    return {"gqnepr": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "shapely": shapely.__version__, "python": sys.version.split()[0]}


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    # the output location does not change results, so it is left out of the record
    cfg = {k: v for k, v in cfg.items() if k != "output_dir"}
    man = {"command": command, "config_hash": config_hash(cfg), "seed": cfg["seed"],
           "config": cfg, "versions": _versions(), **(extra or {})}
    (out / f"manifest_{command}.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=str))


def build_domain(cfg: dict) -> SpatialDomain:
    dom = cfg["domain"]
    if dom["kind"] == "lattice":
        return SpatialDomain.lattice(int(dom["rows"]), int(dom["cols"]), tuple(dom.get("spacing", (1, 1))))
    if dom["kind"] == "areal":
        polys, ids = read_geojson(dom["geojson"], dom.get("id_property"))
        return SpatialDomain.areal(polys, ids)
    sites = dom.get("sites")
    if not sites or not Path(sites).exists():
        raise ConfigError("point_set domains need domain.sites, a CSV with site_id,x,y")
    ids, xy = [], []
    with open(sites, newline="") as fh:
        for rec in csv.DictReader(fh):
            ids.append(rec["site_id"])
            xy.append((float(rec["x"]), float(rec["y"])))
    return SpatialDomain.points(np.array(xy), ids)


def fit_settings(cfg: dict) -> FitSettings:
    b, c, e = cfg["basis"], cfg["calibration"], cfg["epr"]
    sim = cfg["simulation"]
    try:
        prior = PriorSpec.from_config(sim["study"], c["prior"], c["target"], sim.get("gqn") or None)
        hyper = Hyperprior(dict(e["hyperprior"]), float(e["alpha_xi"]))
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return FitSettings(
        r_s=int(b["r_s"]), r_t=b["r_t"], bandwidth=b["bandwidth"], bandwidth_factor=float(b["bandwidth_factor"]),
        n_mc=int(b["n_mc"]), standardize=bool(b["standardize"]), replicates=int(c["replicates"]),
        prior=prior, materialize=bool(c["materialize"]), n_reps=int(e["n_reps"]), hyper=hyper,
        sigma2_known=bool(e["sigma2_known"]), time_varying=bool(e["time_varying"]),
        intercept=bool(cfg["data"]["intercept"]), holdout_fraction=float(cfg["holdout"]["fraction"]),
        log_scale=bool(cfg["scoring"]["log_scale"]), record_timing=bool(cfg["scoring"]["record_timing"]),
        threads=int(cfg["threads"]))


def _times(cfg: dict) -> np.ndarray:
    sim = cfg["simulation"]
    return np.arange(1, int(sim["T"]) + int(sim["horizon"]) + 1)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    sim = cfg["simulation"]
    domain = build_domain(cfg)
    try:
        params = study_params(sim["study"])
        if sim.get("gqn"):
            params = replace(params, **sim["gqn"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    study = simulate_study(domain, params, int(sim["T"]), int(sim["horizon"]), sim["beta"], cfg["family"],
                           cfg["seed"], float(sim["sigma2_z"]), int(sim["n_covariates"]))
    write_observations(out / "observations.csv", study)
    write_latent(out / "latent.csv", study, study.times)
    files = ["observations.csv", "latent.csv"]
    if study.forecast_times.size:
        write_truth(out / "truth.csv", study)
        files.append("truth.csv")
    _write_manifest(out, "simulate", cfg, {"files": files, "beta": list(map(float, study.beta))})
    return out


def cmd_basis(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    bm = build_basis(build_domain(cfg), _times(cfg), fit_settings(cfg), cfg["seed"])
    bm.to_csv(out / "basis.csv")
    _write_manifest(out, "basis", cfg, {"shape": list(bm.shape)})
    return out


def cmd_calibrate(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    settings = fit_settings(cfg)
    bm, cal = calibrate_basis(build_domain(cfg), _times(cfg), settings, cfg["seed"])
    bm.to_csv(out / "basis.csv")
    cal.save(out)
    _write_manifest(out, "calibrate", cfg, {"r": int(cal.K.shape[0]), "nT": int(cal.L.shape[0])})
    return out


def cmd_fit(cfg: dict) -> Path:
    data = cfg["data"]
    if not data.get("observations"):
        raise ConfigError("fit needs data.observations")
    for key in ("observations", "latent", "truth"):
        if data.get(key) and not Path(data[key]).exists():
            raise ConfigError(f"missing file {data[key]}")
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    settings = fit_settings(cfg)
    domain = build_domain(cfg)
    sigma2 = float(cfg["simulation"]["sigma2_z"]) if cfg["family"] == "gaussian" else None
    study = load_study(domain, cfg["family"], data["observations"], data.get("latent"), data.get("truth"),
                       sigma2)
    if data.get("beta") is not None:
        study.beta = np.atleast_1d(np.asarray(data["beta"], dtype=float))
    basis = cal = None
    if data.get("calibration"):
        cal_dir = Path(data["calibration"])
        if not (cal_dir / "calibration.json").exists():
            raise ConfigError(f"no calibration artifacts in {cal_dir}")
        cal = CalibratedCovariance.load(cal_dir)
        basis = BasisMatrix.from_csv(cal_dir / "basis.csv")
    res = fit_study(study, settings, cfg["seed"], basis, cal)
    res.draws.meta.update({"seed": cfg["seed"]})
    res.draws.to_csv(out / "draws.csv", tuple(cfg.get("output", {}).get(
        "draw_blocks", ["xi", "beta", "eta", "q", "theta"])))
    extra = {"covariance": res.meta["covariance"], "target": res.meta["target"], "scale": res.meta["scale"],
             "forecast_by_step": {str(k): v for k, v in res.forecast_by_step.items()},
             "data_digest": _file_digest(data["observations"]), "family": cfg["family"],
             "n_train": res.meta["n_train"], "n_holdout": res.meta["n_holdout"]}
    res.report.to_json(out / "report.json", extra)
    res.report.to_csv(out / "report.csv")
    write_residuals(out / "residuals.csv", res.residual_rows)
    _write_manifest(out, "fit", cfg, {"data_digest": extra["data_digest"]})
    return out


def cmd_compare(run_dirs, out_path) -> Path:
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two fitted run directories")
    reports = []
    for d in run_dirs:
        p = Path(d) / "report.json"
        if not p.exists():
            raise ConfigError(f"no report.json in {d}")
        reports.append(json.loads(p.read_text()))
    digests = {r.get("data_digest") for r in reports}
    if len(digests) != 1:
        raise RuntimeError("runs were fitted to different datasets and cannot be compared")
    steps = sorted({int(k) for r in reports for k in r.get("forecast_by_step", {})})
    cols = ["in_sample_mspe", "out_of_sample_mspe", "crps", "waic", "auc", "beta_mse", "cpu_seconds"]
    cols = [c for c in cols if any(c in r for r in reports)]
    header = ["covariance"] + [f"{h}-step" for h in steps] + cols
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in reports:
            fc = r.get("forecast_by_step", {})
            row = [r.get("covariance", "gqn")]
            row += [repr(float(fc[str(h)])) if str(h) in fc else "" for h in steps]
            row += [repr(float(r[c])) if c in r else "" for c in cols]
            w.writerow(row)
    return out_path


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gqnepr", description="GQN-calibrated spatio-temporal models fitted by exact posterior regression.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("simulate", "simulate a latent GQN field and observations"),
                        ("basis", "build the space-time basis matrix"),
                        ("calibrate", "calibrate the basis covariance to a simulated ensemble"),
                        ("fit", "fit by exact posterior regression and score")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="TOML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set basis.r_s=30")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for ensemble simulation (results do not depend on it)")
        p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    p = sub.add_parser("compare", help="merge reports from fitted runs")
    p.add_argument("runs", nargs="+", help="run directories containing report.json")
    p.add_argument("--out", required=True, help="merged CSV path")
    return ap


COMMANDS = {"simulate": cmd_simulate, "basis": cmd_basis, "calibrate": cmd_calibrate, "fit": cmd_fit}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "compare":
            path = cmd_compare(args.runs, args.out)
            print(path)
            return EXIT_OK
        overrides = list(args.set)
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        if args.out is not None:
            overrides.append(f'output_dir="{Path(args.out).resolve()}"')
        cfg = load_config(args.config, overrides)
        if cfg["threads"] < 1:
            raise ConfigError("threads must be >= 1")
        out = COMMANDS[args.command](cfg)
        print(out)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surface any failure as a runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
