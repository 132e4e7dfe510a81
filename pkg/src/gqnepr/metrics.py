"""Scoring rules and summary reports for fitted models and forecasts."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.special import gammaln, logsumexp


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {truth.size} truths")
    if pred.size == 0:
        raise ValueError("need at least one value")
    return pred, truth


def mspe(pred_mean, truth) -> float:
    pred, truth = _pair(pred_mean, truth)
    return float(np.mean((pred - truth) ** 2))


def residuals(pred_mean, truth) -> np.ndarray:
    pred, truth = _pair(pred_mean, truth)
    return pred - truth


def crps_ensemble(draws, truth) -> float:
    """``mean|X - y| - 0.5 mean|X - X'|`` over all ordered pairs of the ensemble.

    The pair term uses the sorted-sample identity
    ``sum_{i,j}|x_i - x_j| = 2 sum_i (2i - k - 1) x_(i)``, so cost is O(k log k).
    """
    x = np.sort(np.asarray(draws, dtype=float).ravel())
    k = x.size
    if k < 2:
        raise ValueError("CRPS needs at least two draws")
    term1 = np.mean(np.abs(x - float(truth)))
    i = np.arange(1, k + 1)
    pair_sum = 2.0 * np.sum((2 * i - k - 1) * x)
    return float(term1 - 0.5 * pair_sum / k**2)


def crps_rows(draws, truth) -> np.ndarray:
    """CRPS for each row of an (m x k) ensemble matrix."""
    draws = np.asarray(draws, dtype=float)
    truth = np.asarray(truth, dtype=float).ravel()
    if draws.shape[0] != truth.size:
        raise ValueError("one truth value per ensemble row is required")
    if draws.shape[1] < 2:
        raise ValueError("CRPS needs at least two draws")
    x = np.sort(draws, axis=1)
    k = x.shape[1]
    term1 = np.mean(np.abs(x - truth[:, None]), axis=1)
    w = 2 * np.arange(1, k + 1) - k - 1
    return term1 - (x @ w) / k**2


def waic(pointwise_loglik) -> float:
    """``-2 sum_i [log mean_r exp(l_ir) - var_r(l_ir)]`` for an (n_obs x n_reps) matrix."""
    ll = np.asarray(pointwise_loglik, dtype=float)
    if ll.ndim != 2:
        raise ValueError("expected an (n_obs, n_reps) matrix")
    if not np.all(np.isfinite(ll)):
        raise ValueError("log-likelihood matrix has non-finite entries")
    lppd = logsumexp(ll, axis=1) - np.log(ll.shape[1])
    p_waic = ll.var(axis=1, ddof=1) if ll.shape[1] > 1 else np.zeros(ll.shape[0])
    return float(-2.0 * np.sum(lppd - p_waic))


def auc(scores, labels) -> float:
    """Mann-Whitney form: P(score_pos > score_neg) + 0.5 P(tie), via mid-ranks."""
    from scipy.stats import rankdata

    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n1, n0 = int(pos.sum()), int((y == 0).sum())
    if n1 + n0 != y.size:
        raise ValueError("labels must be 0/1")
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def pointwise_loglik(family: str, z, latent, sigma2=None) -> np.ndarray:
    """Data log-likelihood for each (row, replicate) given latent draws (n x k)."""
    z = np.asarray(z, dtype=float)[:, None]
    eta = np.asarray(latent, dtype=float)
    if family == "gaussian":
        s2 = np.asarray(sigma2, dtype=float)
        s2 = s2[:, None] if s2.ndim == 1 else s2
        return -0.5 * (np.log(2 * np.pi * s2) + (z - eta) ** 2 / s2)
    if family == "poisson":
        return z * eta - np.exp(eta) - gammaln(z + 1)
    if family == "bernoulli":
        return z * eta - np.logaddexp(0.0, eta)
    raise ValueError(f"unknown family {family!r}")


@dataclass
class ScoreReport:
    """Scalar scores for one fit; ``None`` marks a score that does not apply."""

    forecast_error: float | None = None
    in_sample_mspe: float | None = None
    out_of_sample_mspe: float | None = None
    beta_mse: float | None = None
    crps: float | None = None
    waic: float | None = None
    auc: float | None = None
    cpu_seconds: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self, path, extra: dict | None = None) -> None:
        Path(path).write_text(json.dumps({**self.to_dict(), **(extra or {})}, indent=2, sort_keys=True))

    def to_csv(self, path) -> None:
        d = self.to_dict()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(d))
            w.writerow([repr(float(v)) for v in d.values()])

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})
