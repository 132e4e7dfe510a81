"""Linear (VAR(1)) and generalized quadratic nonlinear (GQN) dynamics.

The GQN update for site ``i`` is::

    u_t[i] = sum_j A[i, j] u_{t-1}[j]
             + sum_{k,l} B[i, k, l] u_{t-1}[k] g(u_{t-1}[l])
             + eta_t[i]

with ``g(x) = gamma0 * exp(1 - x / gamma1)`` (population growth form) or
``g(x) = x`` (the logistic split used by the reaction-diffusion operator).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import tomli_w
from scipy.spatial.distance import cdist

from ._rng import make_rng
from .config import load_toml

G_KINDS = ("exponential", "identity")


# ---------------------------------------------------------------------------
# Domain and containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpatialDomain:
    """Sites of a spatio-temporal process.

    ``kind`` is one of ``"lattice"``, ``"point_set"`` or ``"areal"``. Lattice
    sites are numbered row-major (``i = row * cols + col``); column index runs
    along the first coordinate ``s1`` and row index along ``s2``. Areal domains
    carry shapely polygons and use their centroids as ``coords``.
    """

    kind: str
    coords: np.ndarray
    ids: tuple
    shape: tuple[int, int] | None = None
    spacing: tuple[float, float] | None = None
    polygons: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("lattice", "point_set", "areal"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 1:
            raise ValueError("coords must be an (n, 2) array with n >= 1")
        object.__setattr__(self, "coords", coords)
        if len(self.ids) != coords.shape[0]:
            raise ValueError("ids and coords disagree on n")
        if self.kind == "lattice":
            rows, cols = self.shape
            if rows * cols != coords.shape[0]:
                raise ValueError("lattice n must equal rows * cols")
        if self.kind == "areal" and (self.polygons is None or len(self.polygons) != coords.shape[0]):
            raise ValueError("areal domains need one polygon per unit")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def lattice(cls, rows: int, cols: int, spacing=(1.0, 1.0), origin=(1.0, 1.0)) -> "SpatialDomain":
        if rows < 1 or cols < 1:
            raise ValueError("lattice needs rows, cols >= 1")
        ds1, ds2 = (float(v) for v in spacing)
        if ds1 <= 0 or ds2 <= 0:
            raise ValueError("lattice spacing must be positive")
        rr, cc = np.divmod(np.arange(rows * cols), cols)
        coords = np.column_stack([origin[0] + cc * ds1, origin[1] + rr * ds2])
        ids = tuple(str(i) for i in range(rows * cols))
        return cls("lattice", coords, ids, shape=(int(rows), int(cols)), spacing=(ds1, ds2))

    @classmethod
    def points(cls, coords, ids: Sequence | None = None) -> "SpatialDomain":
        coords = np.asarray(coords, dtype=float)
        ids = tuple(str(i) for i in (ids if ids is not None else range(len(coords))))
        return cls("point_set", coords, ids)

    @classmethod
    def areal(cls, polygons: Sequence, ids: Sequence | None = None) -> "SpatialDomain":
        polygons = tuple(polygons)
        coords = np.array([[p.centroid.x, p.centroid.y] for p in polygons])
        ids = tuple(str(i) for i in (ids if ids is not None else range(len(polygons))))
        return cls("areal", coords, ids, polygons=polygons)

    def distances(self) -> np.ndarray:
        return cdist(self.coords, self.coords)


class SparseTensor3:
    """Coordinate-list rank-3 tensor ``B[i, k, l]`` holding only declared nonzeros."""

    def __init__(self, n: int, i=(), k=(), l=(), values=()):
        self.n = int(n)
        self.i = np.asarray(i, dtype=np.int64).ravel()
        self.k = np.asarray(k, dtype=np.int64).ravel()
        self.l = np.asarray(l, dtype=np.int64).ravel()
        self.values = np.asarray(values, dtype=float).ravel()
        sizes = {self.i.size, self.k.size, self.l.size, self.values.size}
        if len(sizes) != 1:
            raise ValueError("B index and value arrays must have equal length")
        for arr in (self.i, self.k, self.l):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n):
                raise ValueError("B index out of range")

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @classmethod
    def empty(cls, n: int) -> "SparseTensor3":
        return cls(n)

    def contract(self, u: np.ndarray, gu: np.ndarray) -> np.ndarray:
        """Return ``sum_{k,l} B[i,k,l] u[k] gu[l]`` for every ``i``."""
        if self.nnz == 0:
            return np.zeros(self.n)
        return np.bincount(self.i, weights=self.values * u[self.k] * gu[self.l], minlength=self.n)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n, self.n))
        np.add.at(out, (self.i, self.k, self.l), self.values)
        return out


@dataclass(eq=False)
class DynamicsSpec:
    """Everything needed to step and simulate a GQN/VAR(1) process."""

    A: sp.csr_matrix
    B: SparseTensor3
    gamma0: float | np.ndarray
    gamma1: float | np.ndarray
    sigma_eta: np.ndarray
    sigma_0: np.ndarray
    dt: float = 1.0
    g_kind: str = "exponential"
    domain: SpatialDomain | None = None

    def __post_init__(self):
        self.A = sp.csr_matrix(self.A, dtype=float)
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        if self.B.n != n:
            raise ValueError("B dimension does not match A")
        if self.g_kind not in G_KINDS:
            raise ValueError(f"g_kind must be one of {G_KINDS}")
        self.sigma_eta = np.asarray(self.sigma_eta, dtype=float)
        self.sigma_0 = np.asarray(self.sigma_0, dtype=float)
        for name in ("sigma_eta", "sigma_0"):
            if getattr(self, name).shape != (n, n):
                raise ValueError(f"{name} must be {n}x{n}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def linear_only(self) -> "DynamicsSpec":
        """Same spec with the quadratic tensor removed (a VAR(1) process)."""
        return replace(self, B=SparseTensor3.empty(self.n))


@dataclass(eq=False)
class FieldSeries:
    """``values[i, t]`` is the field at site ``i`` and time label ``times[t]``."""

    values: np.ndarray
    domain: SpatialDomain
    times: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise ValueError("values must be n x T with T >= 1")
        if self.values.shape[0] != self.domain.n:
            raise ValueError("values rows must match domain.n")
        if self.times is None:
            self.times = np.arange(self.values.shape[1])
        self.times = np.asarray(self.times, dtype=int)
        if self.times.shape != (self.values.shape[1],):
            raise ValueError("one time label per column required")

    @property
    def T(self) -> int:
        return self.values.shape[1]

    def stacked(self) -> np.ndarray:
        """Vectorise with sites varying fastest inside each time block."""
        return self.values.ravel(order="F")

    def select_times(self, times) -> "FieldSeries":
        idx = [int(np.flatnonzero(self.times == t)[0]) for t in times]
        return FieldSeries(self.values[:, idx], self.domain, self.times[idx])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site_id", "time", "value"])
            for t_idx, t in enumerate(self.times):
                for i, sid in enumerate(self.domain.ids):
                    w.writerow([sid, int(t), repr(float(self.values[i, t_idx]))])

    @classmethod
    def from_csv(cls, path, domain: SpatialDomain) -> "FieldSeries":
        pos = {sid: i for i, sid in enumerate(domain.ids)}
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append((pos[rec["site_id"]], int(rec["time"]), float(rec["value"])))
        times = np.array(sorted({r[1] for r in rows}))
        tpos = {t: j for j, t in enumerate(times)}
        values = np.full((domain.n, times.size), np.nan)
        for i, t, v in rows:
            values[i, tpos[t]] = v
        if np.isnan(values).any():
            raise ValueError(f"{path}: missing (site, time) cells")
        return cls(values, domain, times)


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------

def g_transform(x, gamma0, gamma1, kind: str = "exponential"):
    """Nonlinear transform applied to the second factor of each quadratic term."""
    if np.any(np.asarray(gamma1) <= 0):
        raise ValueError("gamma1 (carrying capacity) must be positive")
    if kind == "identity":
        return np.asarray(x, dtype=float)
    if kind != "exponential":
        raise ValueError(f"unknown g kind {kind!r}")
    return gamma0 * np.exp(1.0 - np.asarray(x, dtype=float) / gamma1)


def _check_vec(name, v, n):
    v = np.asarray(v, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"{name} has shape {v.shape}, expected ({n},)")
    return v


def var1_step(u_prev, A, eta) -> np.ndarray:
    """One VAR(1) step ``A @ u_prev + eta``."""
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("A must be square")
    u_prev = _check_vec("u_prev", u_prev, n)
    eta = _check_vec("eta", eta, n)
    return A @ u_prev + eta


def gqn_step(u_prev, spec: DynamicsSpec, eta) -> np.ndarray:
    """One GQN step; reduces to :func:`var1_step` when ``spec.B`` is empty."""
    n = spec.n
    u_prev = _check_vec("u_prev", u_prev, n)
    eta = _check_vec("eta", eta, n)
    out = var1_step(u_prev, spec.A, eta)
    if spec.B.nnz:
        out = out + spec.B.contract(u_prev, g_transform(u_prev, spec.gamma0, spec.gamma1, spec.g_kind))
    return out


def covariance_factor(cov, name: str = "covariance") -> np.ndarray:
    """Return ``F`` with ``F @ F.T == cov``.

    Tries Cholesky first; on failure falls back to a symmetric eigen
    decomposition with eigenvalues below ``1e-12 * max`` clipped to zero.
    Raises if the matrix is asymmetric or has eigenvalues below
    ``-1e-10 * max|eig|``.
    """
    cov = np.asarray(cov, dtype=float)
    scale = np.abs(cov).max() if cov.size else 0.0
    if scale == 0.0:
        return np.zeros_like(cov)
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12 * scale):
        raise ValueError(f"{name} is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    lam, vec = np.linalg.eigh(cov)
    top = np.abs(lam).max()
    if lam.min() < -1e-10 * top:
        raise ValueError(f"{name} is not positive semi-definite (min eigenvalue {lam.min():.3g})")
    lam = np.where(lam < 1e-12 * top, 0.0, lam)
    return vec * np.sqrt(lam)


def simulate_series(spec: DynamicsSpec, T: int, seed, *, include_initial: bool = True) -> FieldSeries:
    """Simulate ``U_0 ~ N(0, sigma_0)`` then ``T`` GQN steps.

    Returns times ``0..T`` (or ``1..T`` with ``include_initial=False``).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = make_rng(seed)
    n = spec.n
    f0 = covariance_factor(spec.sigma_0, "sigma_0")
    fe = covariance_factor(spec.sigma_eta, "sigma_eta")
    out = np.empty((n, T + 1))
    out[:, 0] = f0 @ rng.standard_normal(n)
    noise = rng.standard_normal((T, n))
    for t in range(1, T + 1):
        out[:, t] = gqn_step(out[:, t - 1], spec, fe @ noise[t - 1])
    domain = spec.domain if spec.domain is not None else SpatialDomain.points(np.zeros((n, 2)))
    series = FieldSeries(out, domain, np.arange(T + 1))
    return series if include_initial else series.select_times(range(1, T + 1))


# ---------------------------------------------------------------------------
# Operator construction
# ---------------------------------------------------------------------------

def exponential_covariance(coords, sigma2: float, phi: float) -> np.ndarray:
    """``sigma2 * exp(-D / phi)`` with ``D`` the pairwise Euclidean distances."""
    d = cdist(coords, coords)
    return sigma2 * np.exp(-d / phi)


def build_reaction_diffusion(domain: SpatialDomain, delta, gamma0: float, gamma1: float,
                             dt: float = 1.0, sigma_eta=None, sigma_0=None) -> DynamicsSpec:
    """Finite-difference operator for a logistic reaction-diffusion equation.

    Interior stencil at site ``s``::

        self        1 - 2 delta(s) (dt/ds1^2 + dt/ds2^2) + dt * gamma0
        east/west   dt/ds1^2 * [delta(s) +/- (delta(s+ds1) - delta(s-ds1)) / 4]
        north/south dt/ds2^2 * [delta(s) +/- (delta(s+ds2) - delta(s-ds2)) / 4]

    and ``B[i, i, i] = -dt * gamma0 / gamma1`` with identity ``g``. Off-lattice
    neighbours are dropped without rebalancing the self coefficient; a missing
    ``delta`` value in the gradient term is replaced by ``delta(s)``.
    """
    if domain.kind != "lattice":
        raise ValueError("reaction-diffusion operator requires a lattice domain")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if gamma1 <= 0:
        raise ValueError("gamma1 must be positive")
    rows, cols = domain.shape
    ds1, ds2 = domain.spacing
    n = domain.n
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (n,)).reshape(rows, cols)
    c1, c2 = dt / ds1**2, dt / ds2**2

    def shifted(arr, dr, dc):
        # neighbour values with zero-gradient padding at the edge
        padded = np.pad(arr, 1, mode="edge")
        return padded[1 + dr:1 + dr + rows, 1 + dc:1 + dc + cols]

    grad1 = (shifted(delta, 0, 1) - shifted(delta, 0, -1)) / 4.0
    grad2 = (shifted(delta, 1, 0) - shifted(delta, -1, 0)) / 4.0
    coef = {
        (0, 0): 1.0 - 2.0 * delta * (c1 + c2) + dt * gamma0,
        (0, 1): c1 * (delta + grad1),
        (0, -1): c1 * (delta - grad1),
        (1, 0): c2 * (delta + grad2),
        (-1, 0): c2 * (delta - grad2),
    }
    rr, cc = np.divmod(np.arange(n), cols)
    ri, ci, vals = [], [], []
    for (dr, dc), c in coef.items():
        r2, c2_ = rr + dr, cc + dc
        ok = (r2 >= 0) & (r2 < rows) & (c2_ >= 0) & (c2_ < cols)
        ri.append(np.arange(n)[ok])
        ci.append((r2 * cols + c2_)[ok])
        vals.append(c.ravel()[ok])
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))), shape=(n, n))
    idx = np.arange(n)
    B = SparseTensor3(n, idx, idx, idx, np.full(n, -dt * gamma0 / gamma1))
    zeros = np.zeros((n, n))
    return DynamicsSpec(A, B, gamma0, gamma1,
                        zeros if sigma_eta is None else sigma_eta,
                        zeros if sigma_0 is None else sigma_0,
                        dt=dt, g_kind="identity", domain=domain)


@dataclass
class GqnParams:
    """Parameters of the neighbourhood GQN constructions used in the simulation studies.

    ``A`` gets ``delta_self`` on the diagonal and ``delta_neighbor * Bernoulli(p_a)``
    for sites at distance ``0 < d < rho``. With ``b_pattern="diagonal"`` the only
    quadratic term is ``B[i, i, i] = nu``; with ``"neighborhood"`` every
    ``(k, l)`` with both sites within ``rho`` of ``i`` gets ``nu * Bernoulli(p_b)``.
    ``nu = 0`` yields a VAR(1) process.
    """

    delta_self: float = 0.005
    delta_neighbor: float = 0.007
    p_a: float = 0.9
    nu: float = 0.028
    p_b: float = 0.9
    rho: float = 3.0
    b_pattern: str = "neighborhood"
    gamma0: float = 0.01
    gamma1: float = 25.0
    sigma2_eta: float = 0.2
    phi_eta: float = 15.0
    sigma2_0: float = 0.4
    phi_0: float = 20.0

    @classmethod
    def adjacency_study(cls) -> "GqnParams":
        """Four-neighbour stencil with diagonal quadratic term (small study)."""
        return cls(delta_self=0.14, delta_neighbor=0.14, p_a=1.0, nu=1.0, p_b=1.0, rho=1.1,
                   b_pattern="diagonal", gamma0=0.05, gamma1=10.0,
                   sigma2_eta=0.5, phi_eta=10.0, sigma2_0=1.0, phi_0=10.0)

    @classmethod
    def gaussian_study(cls) -> "GqnParams":
        return cls()

    @classmethod
    def poisson_study(cls) -> "GqnParams":
        return cls(delta_self=0.001, delta_neighbor=0.0015, p_a=0.9, nu=0.1, p_b=0.75, rho=4.0,
                   gamma0=0.0001, gamma1=20.0, sigma2_eta=0.2, phi_eta=20.0, sigma2_0=0.4, phi_0=25.0)

    @classmethod
    def bernoulli_study(cls) -> "GqnParams":
        return cls(delta_self=0.009, delta_neighbor=0.0017, p_a=0.9, nu=0.03, p_b=0.95, rho=3.0,
                   gamma0=0.01, gamma1=20.0, sigma2_eta=0.3, phi_eta=20.0, sigma2_0=0.4, phi_0=25.0)


def build_gqn_spec(domain: SpatialDomain, params: GqnParams, seed) -> DynamicsSpec:
    """Draw a (possibly Bernoulli-thinned) GQN operator on ``domain``."""
    rng = make_rng(seed)
    n = domain.n
    d = domain.distances()
    near = d < params.rho
    off = near & (d > 0)
    keep_a = off & (rng.random((n, n)) < params.p_a)
    A = sp.csr_matrix(params.delta_self * np.eye(n) + params.delta_neighbor * keep_a)

    if params.nu == 0.0:
        B = SparseTensor3.empty(n)
    elif params.b_pattern == "diagonal":
        idx = np.arange(n)
        B = SparseTensor3(n, idx, idx, idx, np.full(n, params.nu))
    elif params.b_pattern == "neighborhood":
        ii, kk, ll = [], [], []
        for i in range(n):
            nb = np.flatnonzero(near[i])
            k, l = np.meshgrid(nb, nb, indexing="ij")
            keep = rng.random(k.size) < params.p_b
            ii.append(np.full(keep.sum(), i))
            kk.append(k.ravel()[keep])
            ll.append(l.ravel()[keep])
        ii, kk, ll = (np.concatenate(a) for a in (ii, kk, ll))
        B = SparseTensor3(n, ii, kk, ll, np.full(ii.size, params.nu))
    else:
        raise ValueError(f"unknown b_pattern {params.b_pattern!r}")

    return DynamicsSpec(
        A, B, params.gamma0, params.gamma1,
        exponential_covariance(domain.coords, params.sigma2_eta, params.phi_eta),
        exponential_covariance(domain.coords, params.sigma2_0, params.phi_0),
        domain=domain,
    )


# ---------------------------------------------------------------------------
# TOML round trip
# ---------------------------------------------------------------------------

def _matrix_to_toml(m, sparse: bool) -> dict:
    if sparse:
        coo = sp.coo_matrix(m)
        return {"format": "sparse", "shape": list(coo.shape), "rows": coo.row.tolist(),
                "cols": coo.col.tolist(), "values": coo.data.tolist()}
    return {"format": "dense", "values": np.asarray(m.todense() if sp.issparse(m) else m).tolist()}


def _matrix_from_toml(d: dict):
    if d["format"] == "sparse":
        return sp.coo_matrix((d["values"], (d["rows"], d["cols"])), shape=tuple(d["shape"])).toarray()
    if d["format"] == "dense":
        return np.array(d["values"], dtype=float)
    raise ValueError(f"unknown matrix format {d['format']!r}")


def spec_to_dict(spec: DynamicsSpec, sparse: bool = True) -> dict:
    def scalar_or_list(v):
        v = np.asarray(v, dtype=float)
        return float(v) if v.ndim == 0 else v.tolist()

    return {
        "n": spec.n,
        "dt": float(spec.dt),
        "g_kind": spec.g_kind,
        "gamma0": scalar_or_list(spec.gamma0),
        "gamma1": scalar_or_list(spec.gamma1),
        "A": _matrix_to_toml(spec.A, sparse),
        "B": {"i": spec.B.i.tolist(), "k": spec.B.k.tolist(), "l": spec.B.l.tolist(),
              "values": spec.B.values.tolist()},
        "sigma_eta": _matrix_to_toml(spec.sigma_eta, sparse),
        "sigma_0": _matrix_to_toml(spec.sigma_0, sparse),
    }


def spec_from_dict(d: dict) -> DynamicsSpec:
    n = int(d["n"])
    g0, g1 = d["gamma0"], d["gamma1"]
    return DynamicsSpec(
        A=_matrix_from_toml(d["A"]),
        B=SparseTensor3(n, d["B"]["i"], d["B"]["k"], d["B"]["l"], d["B"]["values"]),
        gamma0=np.array(g0) if isinstance(g0, list) else float(g0),
        gamma1=np.array(g1) if isinstance(g1, list) else float(g1),
        sigma_eta=_matrix_from_toml(d["sigma_eta"]),
        sigma_0=_matrix_from_toml(d["sigma_0"]),
        dt=float(d.get("dt", 1.0)),
        g_kind=d.get("g_kind", "exponential"),
    )


def save_spec(spec: DynamicsSpec, path, sparse: bool = True) -> None:
    Path(path).write_bytes(tomli_w.dumps({"dynamics": spec_to_dict(spec, sparse)}).encode())


def load_spec(path) -> DynamicsSpec:
    return spec_from_dict(load_toml(path)["dynamics"])
