"""Low-rank covariance calibration of a basis expansion to a simulated GQN ensemble."""
from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ._rng import make_rng
from .dynamics import GqnParams, SpatialDomain, build_gqn_spec, simulate_series

_PARAM_NAMES = {f.name for f in fields(GqnParams)} - {"b_pattern"}
_DISTS = ("uniform", "loguniform", "fixed")


@dataclass
class PriorSpec:
    """Independent per-parameter priors over :class:`GqnParams` fields.

    ``ranges`` maps a field name to ``("uniform", lo, hi)``,
    ``("loguniform", lo, hi)`` or ``("fixed", value)``. Fields not listed keep
    their value from ``base``. ``target="var1"`` forces ``nu = 0`` so every
    replicate is a linear VAR(1) process.
    """

    base: GqnParams = field(default_factory=GqnParams)
    ranges: dict = field(default_factory=dict)
    target: str = "gqn"

    def __post_init__(self):
        if self.target not in ("gqn", "var1"):
            raise ValueError(f"unknown target {self.target!r}")
        clean = {}
        for name, rule in self.ranges.items():
            if name not in _PARAM_NAMES:
                raise ValueError(f"unknown prior parameter {name!r}")
            if isinstance(rule, (int, float)):
                rule = ("fixed", float(rule))
            rule = tuple(rule)
            if rule[0] not in _DISTS:
                raise ValueError(f"{name}: unknown distribution {rule[0]!r}")
            if rule[0] != "fixed":
                lo, hi = float(rule[1]), float(rule[2])
                if hi < lo or (rule[0] == "loguniform" and lo <= 0):
                    raise ValueError(f"{name}: invalid range ({lo}, {hi})")
            clean[name] = rule
        self.ranges = clean

    def sample(self, rng: np.random.Generator) -> GqnParams:
        # iterate in sorted order so draws do not depend on dict insertion order
        vals = {}
        for name in sorted(self.ranges):
            rule = self.ranges[name]
            if rule[0] == "fixed":
                vals[name] = float(rule[1])
            elif rule[0] == "uniform":
                vals[name] = float(rng.uniform(rule[1], rule[2]))
            else:
                vals[name] = float(np.exp(rng.uniform(np.log(rule[1]), np.log(rule[2]))))
        if self.target == "var1":
            vals["nu"] = 0.0
        return replace(self.base, **vals)

    def to_dict(self) -> dict:
        return {"base": asdict(self.base), "ranges": {k: list(v) for k, v in sorted(self.ranges.items())},
                "target": self.target}

    @classmethod
    def from_config(cls, study: str, prior: dict, target: str = "gqn", overrides: dict | None = None):
        """Build from a study preset name plus TOML tables ``{dist, low, high}`` or scalars."""
        base = study_params(study)
        if overrides:
            base = replace(base, **overrides)
        ranges = {}
        for name, rule in prior.items():
            if isinstance(rule, dict):
                dist = rule.get("dist", "uniform")
                ranges[name] = (dist, rule["value"]) if dist == "fixed" else (dist, rule["low"], rule["high"])
            else:
                ranges[name] = rule
        return cls(base, ranges, target)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def study_params(name: str) -> GqnParams:
    presets = {"gaussian": GqnParams.gaussian_study, "poisson": GqnParams.poisson_study,
               "bernoulli": GqnParams.bernoulli_study, "adjacency": GqnParams.adjacency_study}
    if name not in presets:
        raise ValueError(f"unknown study preset {name!r}; choose from {sorted(presets)}")
    return presets[name]()


@dataclass(eq=False)
class EnsembleCovariance:
    """Replicate ensemble summary.

    ``C`` holds the centred replicates (nT x R) so the covariance can be used
    without forming it; ``sigma`` is only filled when materialised.
    """

    mu: np.ndarray
    C: np.ndarray
    prior_spec: PriorSpec | None = None
    sigma: np.ndarray | None = None

    @property
    def R(self) -> int:
        return self.C.shape[1]

    def covariance(self) -> np.ndarray:
        if self.sigma is None:
            self.sigma = (self.C @ self.C.T) / self.R
        return self.sigma


def _replicate(prior: PriorSpec, domain, T, seed, r, times):
    params = prior.sample(make_rng(seed, r, 0))
    spec = build_gqn_spec(domain, params, make_rng(seed, r, 1))
    series = simulate_series(spec, T, make_rng(seed, r, 2), include_initial=False)
    if times is not None:
        series = series.select_times(times)
    return series.stacked()


def ensemble_covariance(prior: PriorSpec, domain: SpatialDomain, T: int, R: int, seed, *,
                        times=None, materialize: bool = False, threads: int = 1) -> EnsembleCovariance:
    """Simulate ``R`` GQN replicates over times ``1..T`` and summarise them.

    Replicate ``r`` uses derived streams ``(seed, r, .)``, so the result does
    not depend on ``threads``. The covariance denominator is ``R``.
    """
    if R < 2:
        raise ValueError("need R >= 2 replicates")
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            cols = list(ex.map(lambda r: _replicate(prior, domain, T, seed, r, times), range(R)))
    else:
        cols = [_replicate(prior, domain, T, seed, r, times) for r in range(R)]
    U = np.column_stack(cols)
    mu = U.mean(axis=1)
    ens = EnsembleCovariance(mu, U - mu[:, None], prior)
    if materialize:
        ens.covariance()
    return ens


# ---------------------------------------------------------------------------
# Frobenius matching
# ---------------------------------------------------------------------------

def _projector(G: np.ndarray):
    """Return ``M = (G'G)^{-1} G'`` via an SVD, after a column-rank check."""
    G = np.asarray(G, dtype=float)
    if G.shape[1] > G.shape[0]:
        raise np.linalg.LinAlgError(
            f"basis matrix is rank deficient: {G.shape[1]} columns but only {G.shape[0]} rows")
    U, s, Vt = np.linalg.svd(G, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise np.linalg.LinAlgError("basis matrix is zero")
    if s[-1] <= 1e-10 * s[0]:
        raise np.linalg.LinAlgError(
            f"basis matrix is rank deficient: smallest singular value {s[-1]:.3e} "
            f"<= 1e-10 x largest {s[0]:.3e}")
    return (Vt.T / s) @ U.T


def frobenius_match(sigma, G) -> np.ndarray:
    """``K = (G'G)^{-1} G' Sigma G (G'G)^{-1}``, the minimiser of ``||GKG' - Sigma||_F``.

    ``sigma`` may be an nT x nT matrix or an :class:`EnsembleCovariance`; for
    the latter the centred replicates are projected directly and the nT x nT
    matrix is never formed.
    """
    M = _projector(G)
    if isinstance(sigma, EnsembleCovariance):
        if sigma.sigma is None:
            MC = M @ sigma.C
            K = MC @ MC.T / sigma.R
        else:
            K = M @ sigma.sigma @ M.T
    else:
        K = M @ np.asarray(sigma, dtype=float) @ M.T
    return (K + K.T) / 2


def psd_sqrt(K) -> np.ndarray:
    """Symmetric square root; eigenvalues below ``1e-12 * max`` are set to 0."""
    K = np.asarray(K, dtype=float)
    scale = max(np.abs(K).max(), 1e-300)
    if np.abs(K - K.T).max() > 1e-8 * scale:
        raise ValueError("K is not symmetric")
    lam, V = np.linalg.eigh((K + K.T) / 2)
    if lam[-1] <= 0:
        raise ValueError("covariance has collapsed: largest eigenvalue <= 0")
    lam = np.where(lam < 1e-12 * lam[-1], 0.0, lam)
    return (V * np.sqrt(lam)) @ V.T


@dataclass(eq=False)
class CalibratedCovariance:
    K: np.ndarray
    K_sqrt: np.ndarray
    L: np.ndarray
    frobenius_residual: float
    meta: dict = field(default_factory=dict)

    def save(self, out_dir, prefix: str = "calibration") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_matrix(out / f"{prefix}_K.csv", self.K)
        _write_matrix(out / f"{prefix}_L.csv", self.L)
        manifest = {"r": int(self.K.shape[0]), "nT": int(self.L.shape[0]),
                    "frobenius_residual": self.frobenius_residual, **self.meta}
        (out / f"{prefix}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, out_dir, prefix: str = "calibration") -> "CalibratedCovariance":
        out = Path(out_dir)
        K = _read_matrix(out / f"{prefix}_K.csv")
        L = _read_matrix(out / f"{prefix}_L.csv")
        meta = json.loads((out / f"{prefix}.json").read_text())
        resid = meta.pop("frobenius_residual")
        for key in ("r", "nT"):
            meta.pop(key, None)
        return cls(K, psd_sqrt(K), L, resid, meta)


def _write_matrix(path, M):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.atleast_2d(M):
            w.writerow([repr(float(v)) for v in row])


def _read_matrix(path):
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def frobenius_residual(sigma, G, K) -> float:
    """``||GKG' - Sigma||_F``; for an ensemble this uses trace identities in r x r / r x R space."""
    G = np.asarray(G, dtype=float)
    if isinstance(sigma, EnsembleCovariance) and sigma.sigma is None:
        C, R = sigma.C, sigma.R
        GtG = G.T @ G
        GtC = G.T @ C
        # ||S||^2 = ||C'C||^2 / R^2 ; <GKG', S> = tr(K G'CC'G)/R ; ||GKG'||^2 = tr(K GtG K GtG)
        ss = np.sum((C.T @ C) ** 2) / R**2
        cross = np.sum(K * (GtC @ GtC.T)) / R
        KG = K @ GtG
        kk = np.sum(KG * KG.T)
        return float(np.sqrt(max(ss - 2 * cross + kk, 0.0)))
    S = sigma.covariance() if isinstance(sigma, EnsembleCovariance) else np.asarray(sigma, dtype=float)
    return float(np.linalg.norm(G @ K @ G.T - S))


def calibrate(sigma, G) -> CalibratedCovariance:
    """Frobenius match, square root, and loading matrix ``L = G K^{1/2}``."""
    G = np.asarray(G, dtype=float)
    K = frobenius_match(sigma, G)
    K_sqrt = psd_sqrt(K)
    return CalibratedCovariance(K, K_sqrt, G @ K_sqrt, frobenius_residual(sigma, G, K))
