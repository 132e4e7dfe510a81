"""End-to-end study pipelines: simulate data, calibrate a basis, fit with EPR, score."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from ._rng import derive_seed, make_rng
from .basis import BasisMatrix, build_basis_matrix, default_grid
from .calibration import CalibratedCovariance, PriorSpec, calibrate, ensemble_covariance
from .dynamics import GqnParams, SpatialDomain, build_gqn_spec, simulate_series
from .epr import (Dataset, EprDesign, Hyperprior, expand_time_varying, inverse_link,
                  latent_predict, posterior_replicates)
from .metrics import ScoreReport, auc, crps_rows, mspe, pointwise_loglik, waic

# sub-stream keys under the run seed
KEY_DYNAMICS, KEY_LATENT, KEY_OBS, KEY_COVARIATES = 1, 2, 3, 4
KEY_ENSEMBLE, KEY_BASIS, KEY_HOLDOUT, KEY_EPR = 11, 12, 13, 14


@dataclass(eq=False)
class StudyData:
    """Observations on ``domain`` at ``times`` plus optional truth for scoring.

    ``z`` and ``covariates`` are site x time (x q); ``latent`` covers
    ``times`` followed by ``forecast_times``; ``truth_z`` holds observations
    at the forecast times.
    """

    domain: SpatialDomain
    family: str
    times: np.ndarray
    z: np.ndarray
    covariates: np.ndarray
    forecast_times: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    latent: np.ndarray | None = None
    truth_z: np.ndarray | None = None
    beta: np.ndarray | None = None
    sigma2_z: float | None = None

    @property
    def all_times(self) -> np.ndarray:
        return np.concatenate([self.times, self.forecast_times]).astype(int)


def simulate_study(domain: SpatialDomain, params: GqnParams, T: int, horizon: int, beta,
                   family: str, seed: int, sigma2_z: float = 0.03, n_covariates: int = 0) -> StudyData:
    """Simulate ``Y = x'beta + U`` with ``U`` a GQN field, and observations of ``Y``.

    The first entry of ``beta`` multiplies an intercept. Covariates are
    standard normal per (site, time); forecast times reuse the last observed
    time's covariates.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.size != 1 + n_covariates:
        raise ValueError(f"beta needs {1 + n_covariates} entries (intercept + covariates)")
    n = domain.n
    spec = build_gqn_spec(domain, params, make_rng(seed, KEY_DYNAMICS))
    U = simulate_series(spec, T + horizon, make_rng(seed, KEY_LATENT), include_initial=False).values
    cov = make_rng(seed, KEY_COVARIATES).standard_normal((n, T, n_covariates))
    cov_all = np.concatenate([cov, np.repeat(cov[:, -1:, :], horizon, axis=1)], axis=1)
    Y = beta[0] + cov_all @ beta[1:] + U
    rng = make_rng(seed, KEY_OBS)
    if family == "gaussian":
        Z = Y + np.sqrt(sigma2_z) * rng.standard_normal(Y.shape)
    elif family == "poisson":
        Z = rng.poisson(np.exp(Y)).astype(float)
    elif family == "bernoulli":
        Z = (rng.random(Y.shape) < expit(Y)).astype(float)
    else:
        raise ValueError(f"unknown family {family!r}")
    times = np.arange(1, T + 1)
    return StudyData(domain, family, times, Z[:, :T], cov, np.arange(T + 1, T + horizon + 1),
                     Y, Z[:, T:], beta, sigma2_z if family == "gaussian" else None)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def write_observations(path, study: StudyData) -> None:
    q = study.covariates.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "time", "value"] + [f"x{j + 1}" for j in range(q)])
        for t_idx, t in enumerate(study.times):
            for i, sid in enumerate(study.domain.ids):
                w.writerow([sid, int(t), repr(float(study.z[i, t_idx]))]
                           + [repr(float(v)) for v in study.covariates[i, t_idx]])


def write_latent(path, study: StudyData, times) -> None:
    idx = [int(np.flatnonzero(study.all_times == t)[0]) for t in times]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "time", "value"])
        for j, t in zip(idx, times):
            for i, sid in enumerate(study.domain.ids):
                w.writerow([sid, int(t), repr(float(study.latent[i, j]))])


def write_truth(path, study: StudyData) -> None:
    T = study.times.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "time", "latent", "value"])
        for h, t in enumerate(study.forecast_times):
            for i, sid in enumerate(study.domain.ids):
                w.writerow([sid, int(t), repr(float(study.latent[i, T + h])),
                            repr(float(study.truth_z[i, h]))])


def _read_table(path, domain: SpatialDomain, value_cols):
    pos = {sid: i for i, sid in enumerate(domain.ids)}
    recs = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        header = rd.fieldnames or []
        for col in ("site_id", "time"):
            if col not in header:
                raise ValueError(f"{path}: missing column {col!r}")
        extra = [c for c in header if c not in ("site_id", "time") and c not in value_cols]
        for rec in rd:
            sid = rec["site_id"]
            if sid not in pos:
                raise ValueError(f"{path}: unknown site_id {sid!r}")
            recs.append((pos[sid], int(rec["time"]), [float(rec[c]) for c in value_cols],
                         [float(rec[c]) for c in extra]))
    times = np.array(sorted({r[1] for r in recs}), dtype=int)
    tpos = {t: j for j, t in enumerate(times)}
    vals = np.full((domain.n, times.size, len(value_cols)), np.nan)
    ext = np.full((domain.n, times.size, len(extra)), np.nan)
    for i, t, v, e in recs:
        vals[i, tpos[t]] = v
        ext[i, tpos[t]] = e
    if np.isnan(vals).any():
        raise ValueError(f"{path}: every (site, time) cell needs a value")
    return times, vals, ext


def load_study(domain: SpatialDomain, family: str, observations, latent=None, truth=None,
               sigma2_z: float | None = None) -> StudyData:
    times, vals, cov = _read_table(observations, domain, ["value"])
    if np.isnan(cov).any():
        raise ValueError(f"{observations}: missing covariate values")
    forecast_times = np.array([], dtype=int)
    truth_z = None
    lat_f = None
    if truth is not None:
        forecast_times, tv, _ = _read_table(truth, domain, ["latent", "value"])
        truth_z = tv[:, :, 1]
        lat_f = tv[:, :, 0]
    lat = None
    if latent is not None:
        lt, lv, _ = _read_table(latent, domain, ["value"])
        if not np.array_equal(lt, times):
            raise ValueError("latent file times do not match observation times")
        lat = lv[:, :, 0] if lat_f is None else np.concatenate([lv[:, :, 0], lat_f], axis=1)
    study = StudyData(domain, family, times, vals[:, :, 0], cov, forecast_times, lat, truth_z,
                      None, sigma2_z)
    Dataset(study.z.ravel(), np.ones((study.z.size, 1)), family)  # validates response support
    return study


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

@dataclass
class FitSettings:
    r_s: int = 15
    r_t: int | None = None
    bandwidth: float | None = None
    bandwidth_factor: float = 1.5
    n_mc: int = 1000
    standardize: bool = True
    replicates: int = 500
    prior: PriorSpec = field(default_factory=PriorSpec)
    materialize: bool = False
    n_reps: int = 1000
    hyper: Hyperprior = field(default_factory=Hyperprior)
    sigma2_known: bool = True
    time_varying: bool = False
    intercept: bool = True
    holdout_fraction: float = 0.0
    log_scale: bool = False
    record_timing: bool = False
    threads: int = 1


@dataclass(eq=False)
class FitResult:
    draws: object
    report: ScoreReport
    forecast_by_step: dict
    residual_rows: list
    basis: BasisMatrix
    calibrated: CalibratedCovariance
    meta: dict


def build_basis(domain: SpatialDomain, times, settings: FitSettings, seed: int) -> BasisMatrix:
    grid = default_grid(domain, times, settings.r_s, settings.r_t, settings.bandwidth,
                        settings.bandwidth_factor, settings.standardize)
    return build_basis_matrix(domain, times, grid, settings.n_mc, derive_seed(seed, KEY_BASIS))


def calibrate_basis(domain: SpatialDomain, times, settings: FitSettings, seed: int,
                    basis: BasisMatrix | None = None):
    """Basis matrix over ``times`` calibrated to a simulated ensemble on the same rows."""
    times = np.asarray(times, dtype=int)
    basis = basis if basis is not None else build_basis(domain, times, settings, seed)
    T_sim = int(times.max())
    ens = ensemble_covariance(settings.prior, domain, T_sim, settings.replicates,
                              derive_seed(seed, KEY_ENSEMBLE), times=times,
                              materialize=settings.materialize, threads=settings.threads)
    cal = calibrate(ens, basis.G)
    cal.meta = {"replicates": settings.replicates, "target": settings.prior.target,
                "prior_digest": settings.prior.digest(), "seed": seed}
    return basis, cal


def holdout_mask(n_sites: int, n_times: int, fraction: float, seed: int) -> np.ndarray:
    """Per-time mask (sites x times) holding out ``round(fraction * n)`` sites without replacement."""
    mask = np.zeros((n_sites, n_times), dtype=bool)
    k = int(round(fraction * n_sites))
    if k == 0:
        return mask
    rng = make_rng(seed, KEY_HOLDOUT)
    for t in range(n_times):
        mask[rng.choice(n_sites, size=k, replace=False), t] = True
    return mask


def _design_rows(study: StudyData, settings: FitSettings):
    """Design matrix over all (site, time) rows, sites fastest; forecast rows use last covariates."""
    n, T = study.z.shape
    H = study.forecast_times.size
    cov = study.covariates
    cov_all = np.concatenate([cov, np.repeat(cov[:, -1:, :], H, axis=1)], axis=1) if H else cov
    cols = [cov_all[:, :, j].ravel(order="F") for j in range(cov.shape[2])]
    if settings.intercept:
        cols.insert(0, np.ones(n * (T + H)))
    if not cols:
        raise ValueError("the design has no columns; enable the intercept or supply covariates")
    X = np.column_stack(cols)
    if settings.time_varying:
        times = np.tile(study.all_times[:, None], (1, n)).ravel()
        X = expand_time_varying(X, times, study.times)
    return X


def _scale(study: StudyData, settings: FitSettings, latent):
    if study.family == "poisson" and settings.log_scale:
        return np.asarray(latent, dtype=float)
    return inverse_link(study.family, latent)


def fit_study(study: StudyData, settings: FitSettings, seed: int, basis: BasisMatrix | None = None,
              calibrated: CalibratedCovariance | None = None) -> FitResult:
    """Calibrate (unless given), fit by EPR on training rows, and score.

    Predictions at every row use ``X beta + L eta``; in-sample targets are the
    latent mean when known, else the observations.
    """
    n, T = study.z.shape
    all_times = study.all_times
    if basis is None or calibrated is None:
        basis, calibrated = calibrate_basis(study.domain, all_times, settings, seed, basis)
    L_all = calibrated.L
    if L_all.shape[0] != n * all_times.size:
        raise ValueError(f"calibrated L has {L_all.shape[0]} rows, data need {n * all_times.size}")
    X_all = _design_rows(study, settings)

    mask = holdout_mask(n, T, settings.holdout_fraction, seed)
    obs_rows = np.arange(n * T)
    held = obs_rows[mask.ravel(order="F")]
    train = obs_rows[~mask.ravel(order="F")]
    fc_rows = np.arange(n * T, n * all_times.size)

    z = study.z.ravel(order="F")
    sigma2 = None
    if study.family == "gaussian" and settings.sigma2_known:
        if study.sigma2_z is None:
            raise ValueError("gaussian fit with known noise variance needs sigma2_z")
        sigma2 = np.full(train.size, study.sigma2_z)
    data = Dataset(z[train], X_all[train], study.family, sigma2=sigma2)

    t0 = time.process_time()
    design = EprDesign.build(X_all[train], L_all[train], settings.hyper)
    draws = posterior_replicates(data, design, settings.n_reps, derive_seed(seed, KEY_EPR))
    cpu = time.process_time() - t0

    pred = latent_predict(draws, X_all, L_all)
    resp = _scale(study, settings, pred)
    mean_resp = resp.mean(axis=1)
    if study.latent is not None:
        target = _scale(study, settings, study.latent.ravel(order="F"))
        target_label = "latent"
    else:
        target = np.concatenate([z, study.truth_z.ravel(order="F") if study.truth_z is not None
                                 else np.array([])])
        if study.family == "poisson" and settings.log_scale:
            target = np.log(np.maximum(target, 0.5))
        target_label = "observed"

    rep = ScoreReport()
    rep.in_sample_mspe = mspe(mean_resp[train], target[train])
    rep.crps = float(np.mean(crps_rows(resp[train], target[train])))
    if held.size:
        rep.out_of_sample_mspe = mspe(mean_resp[held], target[held])
    by_step = {}
    if fc_rows.size and target.size == mean_resp.size:
        rep.forecast_error = mspe(mean_resp[fc_rows], target[fc_rows])
        for h in range(study.forecast_times.size):
            rows = fc_rows[h * n:(h + 1) * n]
            by_step[h + 1] = mspe(mean_resp[rows], target[rows])
    if study.beta is not None and not settings.time_varying and settings.intercept \
            and draws.beta.shape[0] == study.beta.size:
        rep.beta_mse = float(np.mean((draws.beta.mean(axis=1) - study.beta) ** 2))
    s2 = None
    if study.family == "gaussian":
        s2 = sigma2 if sigma2 is not None else draws.theta["sigma2_z"][None, :]
    rep.waic = waic(pointwise_loglik(study.family, z[train], pred[train], s2))
    if study.family == "bernoulli":
        rep.auc = auc(inverse_link("bernoulli", pred[train]).mean(axis=1), z[train])
    if settings.record_timing:
        rep.cpu_seconds = cpu

    resid = []
    labels = [(sid, int(t)) for t in all_times for sid in study.domain.ids]
    split = np.full(labels.__len__(), "train", dtype=object)
    split[held] = "holdout"
    split[fc_rows] = "forecast"
    if target.size == mean_resp.size:
        for j, (sid, t) in enumerate(labels):
            resid.append((sid, t, split[j], float(mean_resp[j]), float(target[j]),
                          float(mean_resp[j] - target[j])))
    meta = {"target": target_label, "n_train": int(train.size), "n_holdout": int(held.size),
            "n_forecast_rows": int(fc_rows.size), "covariance": calibrated.meta.get("target", "gqn"),
            "scale": "log" if (study.family == "poisson" and settings.log_scale) else "response"}
    return FitResult(draws, rep, by_step, resid, basis, calibrated, meta)


def write_residuals(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "time", "split", "predicted", "truth", "residual"])
        for sid, t, s, p, y, r in rows:
            w.writerow([sid, t, s, repr(p), repr(y), repr(r)])
