"""Exact posterior regression: independent posterior replicates without a Markov chain.

The latent model is ``y = X beta + L eta + xi - tau``. Stacking the data
pseudo-observations with the prior pseudo-observations for ``beta``, ``eta``
and ``xi`` gives ``w = H zeta + Q q`` with ``zeta = (xi, beta, eta)``; because
``[H, Q]`` is square and invertible, each replicate of ``w`` maps to exactly
one ``(zeta, q)``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from ._rng import make_rng

FAMILIES = ("gaussian", "poisson", "bernoulli")
HYPER_NAMES = ("sigma2_beta", "sigma2_eta", "sigma2_xi", "sigma2_z")


@dataclass(eq=False)
class Dataset:
    """Observed responses with design rows.

    ``sigma2`` (per-row noise variance) is required for ``gaussian`` when the
    noise variance is treated as known.
    """

    z: np.ndarray
    X: np.ndarray
    family: str
    rows: list | None = None
    sigma2: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        self.z = np.asarray(self.z, dtype=float).ravel()
        self.X = np.asarray(self.X, dtype=float).reshape(self.z.size, -1)
        if self.family == "poisson":
            bad = np.flatnonzero((self.z < 0) | (self.z != np.round(self.z)))
            if bad.size:
                raise ValueError(f"poisson response must be a nonnegative integer (row {bad[0]})")
        elif self.family == "bernoulli":
            bad = np.flatnonzero((self.z != 0) & (self.z != 1))
            if bad.size:
                raise ValueError(f"bernoulli response must be 0 or 1 (row {bad[0]})")
        if self.sigma2 is not None:
            self.sigma2 = np.broadcast_to(np.asarray(self.sigma2, dtype=float), self.z.shape).copy()
            bad = np.flatnonzero(~(self.sigma2 > 0))
            if bad.size:
                raise ValueError(f"gaussian noise variance must be positive (row {bad[0]})")
        if self.rows is not None and len(self.rows) != self.z.size:
            raise ValueError("rows labels do not match response length")

    @property
    def n(self) -> int:
        return self.z.size

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass
class Hyperprior:
    """Independent priors on the variance hyperparameters.

    Each entry is ``("loguniform", lo, hi)``, ``("fixed", value)`` or
    ``("grid", [values...])`` (uniform over the listed values).
    """

    rules: dict = field(default_factory=lambda: {k: ("loguniform", 1e-3, 1e2) for k in HYPER_NAMES})
    alpha_xi: float = 0.001

    def __post_init__(self):
        rules = {k: ("loguniform", 1e-3, 1e2) for k in HYPER_NAMES}
        for k, v in self.rules.items():
            if k not in HYPER_NAMES:
                raise ValueError(f"unknown hyperparameter {k!r}")
            if isinstance(v, (int, float)):
                v = ("fixed", float(v))
            elif isinstance(v, dict):
                d = v.get("dist", "loguniform")
                v = (d, v["value"]) if d == "fixed" else (d, v["values"]) if d == "grid" else (d, v["low"], v["high"])
            v = tuple(v)
            if v[0] == "loguniform":
                if not 0 < v[1] <= v[2]:
                    raise ValueError(f"{k}: invalid log-uniform range")
            elif v[0] == "fixed":
                if not v[1] > 0:
                    raise ValueError(f"{k}: fixed value must be positive")
            elif v[0] == "grid":
                if len(v[1]) == 0 or min(v[1]) <= 0:
                    raise ValueError(f"{k}: grid values must be positive")
            else:
                raise ValueError(f"{k}: unknown distribution {v[0]!r}")
            rules[k] = v
        self.rules = rules
        if self.alpha_xi < 0:
            raise ValueError("alpha_xi must be >= 0")

    def sample(self, rng: np.random.Generator) -> dict:
        out = {}
        for k in HYPER_NAMES:
            rule = self.rules[k]
            if rule[0] == "fixed":
                out[k] = float(rule[1])
            elif rule[0] == "grid":
                out[k] = float(rule[1][rng.integers(len(rule[1]))])
            else:
                out[k] = float(np.exp(rng.uniform(np.log(rule[1]), np.log(rule[2]))))
        return out

    def to_dict(self) -> dict:
        return {"rules": {k: list(v) for k, v in self.rules.items()}, "alpha_xi": self.alpha_xi}


# ---------------------------------------------------------------------------
# Expanded design
# ---------------------------------------------------------------------------

def build_H(n: int, p: int, r: int, X, L) -> np.ndarray:
    """``[[I_n, X, L], [0, I_p, 0], [0, 0, I_r], [I_n, 0, 0]]``."""
    X = np.asarray(X, dtype=float).reshape(n, -1) if p else np.zeros((n, 0))
    L = np.asarray(L, dtype=float)
    if X.shape != (n, p):
        raise ValueError(f"X has shape {X.shape}, expected ({n}, {p})")
    if L.shape != (n, r):
        raise ValueError(f"L has shape {L.shape}, expected ({n}, {r})")
    H = np.zeros((2 * n + p + r, n + p + r))
    H[:n, :n] = np.eye(n)
    H[:n, n:n + p] = X
    H[:n, n + p:] = L
    H[n:n + p, n:n + p] = np.eye(p)
    H[n + p:n + p + r, n + p:] = np.eye(r)
    H[n + p + r:, :n] = np.eye(n)
    return H


def _factor(H):
    m, k = H.shape
    Qf, R, piv = sla.qr(H, mode="full", pivoting=True)
    d = np.abs(np.diag(R[:k, :k]))
    if d.size and d.min() <= 1e-12 * d.max() * max(m, k):
        raise np.linalg.LinAlgError(f"H is rank deficient (pivot {d.min():.3e})")
    return Qf, R[:k, :k], piv


def build_Q(H) -> np.ndarray:
    """Orthonormal basis of the null space of ``H'`` from a full pivoted QR of ``H``."""
    Qf, _, _ = _factor(np.asarray(H, dtype=float))
    return Qf[:, H.shape[1]:]


@dataclass(eq=False)
class EprDesign:
    """Cached factorisation of ``H`` for repeated replicate generation."""

    X: np.ndarray
    L: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    Hpinv: np.ndarray
    hyper: Hyperprior

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def r(self) -> int:
        return self.L.shape[1]

    @classmethod
    def build(cls, X, L, hyper: Hyperprior | None = None) -> "EprDesign":
        L = np.asarray(L, dtype=float)
        n, r = L.shape
        X = np.asarray(X, dtype=float).reshape(n, -1)
        p = X.shape[1]
        H = build_H(n, p, r, X, L)
        Qf, R1, piv = _factor(H)
        k = H.shape[1]
        # (H'H)^{-1} H' = P R1^{-1} Q1'
        sol = sla.solve_triangular(R1, Qf[:, :k].T)
        Hpinv = np.empty_like(sol)
        Hpinv[piv] = sol
        return cls(X, L, H, Qf[:, k:], Hpinv, hyper or Hyperprior())


# ---------------------------------------------------------------------------
# Diaconis-Ylvisaker variates
# ---------------------------------------------------------------------------

def _log_gamma_variate(rng, shape):
    """``log Gamma(shape, 1)`` computed stably for small shapes."""
    shape = np.asarray(shape, dtype=float)
    out = np.empty(shape.shape)
    small = shape < 1.0
    if np.any(~small):
        out[~small] = np.log(rng.standard_gamma(shape[~small]))
    if np.any(small):
        a = shape[small]
        # Gamma(a) = Gamma(a + 1) * U^(1/a)
        out[small] = np.log(rng.standard_gamma(a + 1.0)) + np.log(rng.random(a.size)) / a
    return out


def _first_bad(mask):
    idx = np.flatnonzero(np.atleast_1d(mask))
    return int(idx[0]) if idx.size else None


def dy_sample(family: str, a, b, seed) -> np.ndarray:
    """Draw ``w`` with density proportional to ``exp(a w - b psi(w))`` elementwise.

    gaussian (``psi = w^2``) is Normal(a / 2b, 1 / 2b); poisson (``psi = e^w``)
    is log Gamma(a, rate b); bernoulli (``psi = log(1 + e^w)``) is logit
    Beta(a, b - a).
    """
    rng = make_rng(seed)
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.broadcast_to(np.asarray(b, dtype=float), a.shape)
    if family == "gaussian":
        i = _first_bad(~(b > 0))
        if i is not None:
            raise ValueError(f"gaussian DY needs b > 0 (row {i})")
        return a / (2 * b) + rng.standard_normal(a.shape) / np.sqrt(2 * b)
    if family == "poisson":
        i = _first_bad(~(a > 0))
        if i is not None:
            raise ValueError(f"poisson DY needs a > 0 (row {i}); "
                             "rows with zero counts require alpha_xi > 0")
        i = _first_bad(~(b > 0))
        if i is not None:
            raise ValueError(f"poisson DY needs b > 0 (row {i})")
        return _log_gamma_variate(rng, a) - np.log(b)
    if family == "bernoulli":
        i = _first_bad(~((a > 0) & (b > a)))
        if i is not None:
            raise ValueError(f"bernoulli DY needs b > a > 0 (row {i}); use alpha_xi > 0")
        return _log_gamma_variate(rng, a) - _log_gamma_variate(rng, b - a)
    raise ValueError(f"unknown family {family!r}")


def dy_parameters(dataset: Dataset, theta: dict, alpha_xi: float):
    """Per-row ``(alpha, kappa)`` of the data-model DY for each family."""
    z = dataset.z
    if dataset.family == "gaussian":
        s2 = dataset.sigma2 if dataset.sigma2 is not None else np.full(z.shape, theta["sigma2_z"])
        return z / s2, 1.0 / (2.0 * s2)
    if dataset.family == "poisson":
        if alpha_xi <= 0:
            i = _first_bad(z == 0)
            if i is not None:
                raise ValueError(f"row {i} has a zero count; poisson fits need alpha_xi > 0")
        return z + alpha_xi, np.ones_like(z)
    return z + alpha_xi, np.full(z.shape, 1.0 + 2.0 * alpha_xi)


# ---------------------------------------------------------------------------
# Replicates
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PosteriorDraws:
    """Replicates stored column-wise: ``beta`` is p x n_reps, and so on."""

    xi: np.ndarray
    beta: np.ndarray
    eta: np.ndarray
    q: np.ndarray
    theta: dict
    design: EprDesign | None = None
    meta: dict = field(default_factory=dict)
    w_stack: np.ndarray | None = None

    @property
    def n_reps(self) -> int:
        return self.beta.shape[1]

    def tau_y(self) -> np.ndarray:
        """Data block of the discrepancy, ``-(Q q)[:n]``, per replicate (n x n_reps)."""
        if self.design is None:
            raise ValueError("draws are detached from their design; tau cannot be rebuilt")
        return -(self.design.Q[: self.design.n] @ self.q)

    def w(self) -> np.ndarray:
        """Stacked ``H zeta + Q q`` per replicate."""
        zeta = np.vstack([self.xi, self.beta, self.eta])
        return self.design.H @ zeta + self.design.Q @ self.q

    def to_csv(self, path, blocks=("xi", "beta", "eta", "q", "theta")) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["replicate", "block", "index", "value"])
            for rep in range(self.n_reps):
                for blk in blocks:
                    if blk == "theta":
                        for k in HYPER_NAMES:
                            wr.writerow([rep, "theta", k, repr(float(self.theta[k][rep]))])
                        continue
                    arr = getattr(self, blk)[:, rep]
                    for j, v in enumerate(arr):
                        wr.writerow([rep, blk, j, repr(float(v))])
        manifest = {"n_reps": self.n_reps, "blocks": list(blocks), "dims": {
            "n": int(self.xi.shape[0]), "p": int(self.beta.shape[0]), "r": int(self.eta.shape[0])},
            **self.meta}
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def from_csv(cls, path) -> "PosteriorDraws":
        path = Path(path)
        man = json.loads(path.with_suffix(".json").read_text())
        dims, R = man["dims"], man["n_reps"]
        arrs = {"xi": np.full((dims["n"], R), np.nan), "beta": np.full((dims["p"], R), np.nan),
                "eta": np.full((dims["r"], R), np.nan), "q": np.full((dims["n"], R), np.nan)}
        theta = {k: np.full(R, np.nan) for k in HYPER_NAMES}
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            next(rd)
            for rep, blk, idx, val in rd:
                if blk == "theta":
                    theta[idx][int(rep)] = float(val)
                else:
                    arrs[blk][int(idx), int(rep)] = float(val)
        meta = {k: v for k, v in man.items() if k not in ("n_reps", "blocks", "dims")}
        return cls(arrs["xi"], arrs["beta"], arrs["eta"], arrs["q"], theta, None, meta)


def posterior_replicates(dataset: Dataset, design: EprDesign, n_reps: int, seed,
                         keep_w: bool = False) -> PosteriorDraws:
    """Independent replicates of ``(xi, beta, eta, q)``.

    Replicate ``j`` draws its hyperparameters, DY data variates and prior
    pseudo-observations from stream ``(seed, j)``, then maps the stacked
    vector through the cached ``(H'H)^{-1}H'`` and ``Q'``. ``keep_w`` retains
    the stacked pseudo-observations ``(y_rep, w_beta, w_eta, w_xi)``.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    n, p, r = design.n, design.p, design.r
    if dataset.n != n or dataset.p != p:
        raise ValueError("dataset rows/columns do not match the design")
    hyper = design.hyper
    W = np.empty((2 * n + p + r, n_reps))
    theta = {k: np.empty(n_reps) for k in HYPER_NAMES}
    for j in range(n_reps):
        rng = make_rng(seed, j)
        th = hyper.sample(rng)
        for k in HYPER_NAMES:
            theta[k][j] = th[k]
        a, b = dy_parameters(dataset, th, hyper.alpha_xi)
        W[:n, j] = dy_sample(dataset.family, a, b, rng)
        W[n:n + p, j] = np.sqrt(th["sigma2_beta"]) * rng.standard_normal(p)
        W[n + p:n + p + r, j] = np.sqrt(th["sigma2_eta"]) * rng.standard_normal(r)
        W[n + p + r:, j] = np.sqrt(th["sigma2_xi"]) * rng.standard_normal(n)
    zeta = design.Hpinv @ W
    q = design.Q.T @ W
    meta = {"family": dataset.family, "hyperprior": hyper.to_dict(), "seed": seed
            if isinstance(seed, int) else None}
    return PosteriorDraws(zeta[:n], zeta[n:n + p], zeta[n + p:], q, theta, design, meta,
                          W if keep_w else None)


def latent_predict(draws: PosteriorDraws, X_rows, L_rows, include_xi: bool = False,
                   rows=None) -> np.ndarray:
    """Latent predictions per replicate (m x n_reps).

    Without ``include_xi`` this is ``X beta + L eta``, the only part defined at
    new rows. With ``include_xi``, ``rows`` must index observed rows and the
    result is ``X beta + L eta + xi - tau_y`` there.
    """
    X_rows = np.asarray(X_rows, dtype=float)
    L_rows = np.asarray(L_rows, dtype=float)
    if X_rows.ndim == 1:
        X_rows = X_rows[:, None]
    m = L_rows.shape[0]
    if X_rows.shape[0] != m:
        raise ValueError("X_rows and L_rows disagree on the number of rows")
    if X_rows.shape[1] != draws.beta.shape[0]:
        raise ValueError(f"prediction rows need {draws.beta.shape[0]} covariate columns, "
                         f"got {X_rows.shape[1]}")
    if np.isnan(X_rows).any():
        raise ValueError("prediction rows have missing covariates")
    pred = X_rows @ draws.beta + L_rows @ draws.eta
    if include_xi:
        if rows is None:
            raise ValueError("include_xi needs the observed-row indices of the prediction rows")
        rows = np.asarray(rows, dtype=int)
        pred = pred + draws.xi[rows] - draws.tau_y()[rows]
    return pred


def inverse_link(family: str, latent):
    latent = np.asarray(latent, dtype=float)
    if family == "gaussian":
        return latent
    if family == "poisson":
        return np.exp(latent)
    if family == "bernoulli":
        from scipy.special import expit

        return expit(latent)
    raise ValueError(f"unknown family {family!r}")


def expand_time_varying(X, times, time_levels=None):
    """Block-expand ``X`` so each time level gets its own coefficients (p * T columns).

    Rows at times not in ``time_levels`` (e.g. forecasts) reuse the last level's block.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    times = np.asarray(times)
    levels = np.unique(times) if time_levels is None else np.asarray(time_levels)
    p = X.shape[1]
    out = np.zeros((X.shape[0], p * levels.size))
    pos = {t: j for j, t in enumerate(levels.tolist())}
    last = levels.size - 1
    for i, t in enumerate(times.tolist()):
        j = pos.get(t, last)
        out[i, j * p:(j + 1) * p] = X[i]
    return out
