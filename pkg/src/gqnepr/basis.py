"""Space-time bisquare basis functions with Monte Carlo change of support."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import shape as _shape

from ._rng import make_rng
from .dynamics import SpatialDomain

MAX_REJECTION_ATTEMPTS = 10**7


def bisquare_eval(s, t, knot, gamma: float) -> float:
    """``[1 - (d / gamma)^2]^2`` for ``d <= gamma`` else 0.

    ``d`` is the Euclidean norm of ``(s, t) - (c, p)`` for ``knot = (c, p)``.
    """
    if gamma <= 0:
        raise ValueError("bandwidth gamma must be positive")
    c, p = knot
    diff = np.append(np.asarray(s, float) - np.asarray(c, float), float(t) - float(p))
    d = float(np.sqrt(diff @ diff))
    return (1.0 - (d / gamma) ** 2) ** 2 if d <= gamma else 0.0


def _bisquare(d2, gamma):
    u = d2 / gamma**2
    return np.where(u <= 1.0, (1.0 - u) ** 2, 0.0)


@dataclass
class KnotGrid:
    """Spatial and temporal knots plus the coordinate scaling used to compare them.

    When ``standardize`` is true, each spatial axis and the time axis are mapped
    to ``[0, 1]`` over ``space_bounds`` / ``time_bounds`` before the joint
    ``(s, t)`` distance is formed, and ``bandwidth`` is in those units.
    """

    spatial_knots: np.ndarray
    temporal_knots: np.ndarray
    bandwidth: float
    space_bounds: tuple = ((0.0, 1.0), (0.0, 1.0))
    time_bounds: tuple = (0.0, 1.0)
    standardize: bool = True

    def __post_init__(self):
        self.spatial_knots = np.atleast_2d(np.asarray(self.spatial_knots, dtype=float))
        self.temporal_knots = np.atleast_1d(np.asarray(self.temporal_knots, dtype=float))
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    @property
    def r_s(self) -> int:
        return self.spatial_knots.shape[0]

    @property
    def r_t(self) -> int:
        return self.temporal_knots.size

    @property
    def r(self) -> int:
        return self.r_s * self.r_t

    def scale_space(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        if not self.standardize:
            return xy
        lo = np.array([b[0] for b in self.space_bounds])
        span = np.array([b[1] - b[0] for b in self.space_bounds])
        span[span == 0] = 1.0
        return (xy - lo) / span

    def scale_time(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if not self.standardize:
            return t
        lo, hi = self.time_bounds
        return (t - lo) / ((hi - lo) or 1.0)

    def knots(self):
        """Scaled ``(c_j, p_j)`` for every column; space-major, time fastest."""
        c = self.scale_space(self.spatial_knots)
        p = self.scale_time(self.temporal_knots)
        return np.repeat(c, self.r_t, axis=0), np.tile(p, self.r_s)

    def evaluate(self, xy, t) -> np.ndarray:
        """Basis values at points ``xy`` (m x 2) all observed at time ``t``: (m x r)."""
        c, p = self.knots()
        xy = self.scale_space(xy)
        ts = float(self.scale_time(t))
        d2 = ((xy[:, None, :] - c[None, :, :]) ** 2).sum(-1) + (ts - p[None, :]) ** 2
        return _bisquare(d2, self.bandwidth)

    @classmethod
    def regular(cls, space_bounds, time_bounds, r_s: int, r_t: int, bandwidth: float | None = None,
                bandwidth_factor: float = 1.5, standardize: bool = True) -> "KnotGrid":
        """Evenly spaced knots over a bounding box.

        ``r_s`` need not be a rectangle: knots are laid out in
        ``round(sqrt(r_s))`` rows, each row evenly spaced across the box, with
        counts differing by at most one between rows.
        """
        if r_s < 1 or r_t < 1:
            raise ValueError("need at least one spatial and one temporal knot")
        (x0, x1), (y0, y1) = space_bounds
        t0, t1 = time_bounds
        n_rows = max(1, int(round(np.sqrt(r_s))))
        counts = np.full(n_rows, r_s // n_rows)
        counts[: r_s % n_rows] += 1
        ys = np.linspace(y0, y1, n_rows) if n_rows > 1 else np.array([(y0 + y1) / 2])
        pts = []
        for y, cnt in zip(ys, counts):
            xs = np.linspace(x0, x1, cnt) if cnt > 1 else np.array([(x0 + x1) / 2])
            pts.extend((x, y) for x in xs)
        temporal = np.linspace(t0, t1, r_t) if r_t > 1 else np.array([(t0 + t1) / 2])
        grid = cls(np.array(pts), temporal, 1.0, tuple(map(tuple, space_bounds)), (t0, t1), standardize)
        if bandwidth is None:
            bandwidth = bandwidth_factor * grid.max_spacing()
        grid.bandwidth = float(bandwidth)
        return grid

    def max_spacing(self) -> float:
        """Largest nearest-neighbour gap among spatial knots or temporal knots (scaled)."""
        gaps = [0.0]
        c = self.scale_space(self.spatial_knots)
        if len(c) > 1:
            d = np.sqrt(((c[:, None] - c[None]) ** 2).sum(-1))
            np.fill_diagonal(d, np.inf)
            gaps.append(d.min(axis=1).max())
            # rows of a staggered layout are separated in y as well
            ys = np.unique(np.round(c[:, 1], 12))
            if ys.size > 1:
                gaps.append(np.diff(ys).max())
        p = np.sort(self.scale_time(self.temporal_knots))
        if p.size > 1:
            gaps.append(np.diff(p).max())
        out = max(gaps)
        return out if out > 0 else 1.0

    def to_dict(self) -> dict:
        return {
            "spatial_knots": self.spatial_knots.tolist(),
            "temporal_knots": self.temporal_knots.tolist(),
            "bandwidth": self.bandwidth,
            "space_bounds": [list(b) for b in self.space_bounds],
            "time_bounds": list(self.time_bounds),
            "standardize": self.standardize,
            "column_order": "spatial-major, temporal fastest",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KnotGrid":
        return cls(np.array(d["spatial_knots"]), np.array(d["temporal_knots"]), float(d["bandwidth"]),
                   tuple(tuple(b) for b in d["space_bounds"]), tuple(d["time_bounds"]),
                   bool(d["standardize"]))


# ---------------------------------------------------------------------------
# Polygons
# ---------------------------------------------------------------------------

def sample_polygon(polygon, n: int, seed) -> np.ndarray:
    """Uniform points inside ``polygon`` by bounding-box rejection."""
    if n < 1:
        raise ValueError("need at least one sample")
    x0, y0, x1, y1 = polygon.bounds
    box = (x1 - x0) * (y1 - y0)
    if polygon.area <= 1e-12 * max(box, 1e-300) or box == 0:
        raise ValueError("degenerate polygon (area ~ 0)")
    rng = make_rng(seed)
    shapely.prepare(polygon)
    out = np.empty((0, 2))
    attempts = 0
    batch = max(64, int(1.3 * n * box / polygon.area))
    while out.shape[0] < n:
        if attempts >= MAX_REJECTION_ATTEMPTS:
            raise ValueError("rejection sampling exceeded attempt cap; polygon may be degenerate")
        m = min(batch, MAX_REJECTION_ATTEMPTS - attempts)
        pts = np.column_stack([rng.uniform(x0, x1, m), rng.uniform(y0, y1, m)])
        attempts += m
        inside = shapely.contains_xy(polygon, pts[:, 0], pts[:, 1])
        out = np.vstack([out, pts[inside]])
    return out[:n]


def integrate_basis_over_area(polygon, t, knot, gamma: float, n_mc: int = 1000, seed=0,
                              return_se: bool = False):
    """Monte Carlo average of one bisquare function over a polygon.

    Returns the mean over ``n_mc`` uniform points (and its standard error when
    ``return_se``). Coordinates are used as given; no standardisation.
    """
    if gamma <= 0:
        raise ValueError("bandwidth gamma must be positive")
    pts = sample_polygon(polygon, n_mc, seed)
    c, p = knot
    d2 = ((pts - np.asarray(c, float)) ** 2).sum(1) + (float(t) - float(p)) ** 2
    vals = _bisquare(d2, gamma)
    mean = float(vals.mean())
    if return_se:
        se = float(vals.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else float("nan")
        return mean, se
    return mean


def read_geojson(path, id_property: str | None = None):
    """Polygons and ids from a GeoJSON FeatureCollection (coordinates taken as planar)."""
    data = json.loads(Path(path).read_text())
    feats = data["features"] if data.get("type") == "FeatureCollection" else [data]
    polys, ids = [], []
    for j, f in enumerate(feats):
        geom = _shape(f["geometry"])
        if geom.geom_type not in ("Polygon", "MultiPolygon"):
            raise ValueError(f"feature {j}: unsupported geometry {geom.geom_type}")
        polys.append(geom)
        props = f.get("properties") or {}
        if id_property:
            ids.append(str(props[id_property]))
        else:
            ids.append(str(f.get("id", j)))
    return polys, ids


# ---------------------------------------------------------------------------
# Basis matrix
# ---------------------------------------------------------------------------

@dataclass
class BasisMatrix:
    """Rows enumerate ``(site_id, time)`` pairs, sites fastest within each time."""

    G: np.ndarray
    row_index: list
    knot_grid: KnotGrid
    uncovered: np.ndarray = field(default=None)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.uncovered is None:
            self.uncovered = ~(self.G > 0).any(axis=1)

    @property
    def shape(self):
        return self.G.shape

    def rows_for(self, pairs) -> np.ndarray:
        pos = {key: j for j, key in enumerate(self.row_index)}
        return np.array([pos[(str(s), int(t))] for s, t in pairs], dtype=int)

    def to_csv(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site_id", "time"] + [f"g{j}" for j in range(self.G.shape[1])])
            for (sid, t), row in zip(self.row_index, self.G):
                w.writerow([sid, t] + [repr(float(v)) for v in row])
        side = {"knot_grid": self.knot_grid.to_dict(), "shape": list(self.G.shape),
                "uncovered_rows": int(self.uncovered.sum()), **self.meta}
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))

    @classmethod
    def from_csv(cls, path) -> "BasisMatrix":
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        rows, vals = [], []
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            next(r)
            for rec in r:
                rows.append((rec[0], int(rec[1])))
                vals.append([float(v) for v in rec[2:]])
        meta = {k: v for k, v in side.items() if k not in ("knot_grid", "shape", "uncovered_rows")}
        return cls(np.array(vals).reshape(len(rows), -1), rows, KnotGrid.from_dict(side["knot_grid"]),
                   meta=meta)


def default_grid(domain: SpatialDomain, times, r_s: int, r_t: int | None = None, bandwidth=None,
                 bandwidth_factor: float = 1.5, standardize: bool = True) -> KnotGrid:
    """Regular knot grid spanning the domain's bounding box and the given times."""
    if domain.kind == "areal":
        b = np.array([p.bounds for p in domain.polygons])
        sb = ((b[:, 0].min(), b[:, 2].max()), (b[:, 1].min(), b[:, 3].max()))
    else:
        lo, hi = domain.coords.min(0), domain.coords.max(0)
        sb = ((lo[0], hi[0]), (lo[1], hi[1]))
    times = np.asarray(times)
    r_t = int(r_t) if r_t else times.size
    return KnotGrid.regular(sb, (float(times.min()), float(times.max())), r_s, r_t,
                            bandwidth=bandwidth, bandwidth_factor=bandwidth_factor,
                            standardize=standardize)


def build_basis_matrix(domain: SpatialDomain, times, grid: KnotGrid, n_mc: int = 1000,
                       seed=0) -> BasisMatrix:
    """Evaluate every basis function at every ``(site, time)`` pair.

    Point and lattice sites use the bisquare directly; areal units average it
    over ``n_mc`` uniform points per polygon. The point sample of a polygon is
    drawn once (stream ``(seed, unit index)``) and reused for all knots and times.
    """
    times = [int(t) for t in times]
    t_lo, t_hi = grid.temporal_knots.min(), grid.temporal_knots.max()
    reach = grid.bandwidth * ((grid.time_bounds[1] - grid.time_bounds[0]) or 1.0) if grid.standardize \
        else grid.bandwidth
    outside = [t for t in times if t < t_lo - reach or t > t_hi + reach]
    if outside:
        warnings.warn(f"times {outside} lie outside temporal knot coverage; rows may be all zero",
                      stacklevel=2)

    blocks = []
    if domain.kind == "areal":
        samples = [sample_polygon(poly, n_mc, make_rng(seed, j)) for j, poly in enumerate(domain.polygons)]
        for t in times:
            blocks.append(np.vstack([grid.evaluate(pts, t).mean(axis=0) for pts in samples]))
    else:
        for t in times:
            blocks.append(grid.evaluate(domain.coords, t))
    G = np.vstack(blocks)
    rows = [(sid, t) for t in times for sid in domain.ids]
    meta = {"domain_kind": domain.kind, "n_mc": n_mc if domain.kind == "areal" else None,
            "seed": seed if domain.kind == "areal" else None,
            "coordinate_standardization": grid.standardize}
    return BasisMatrix(G, rows, grid, meta=meta)
