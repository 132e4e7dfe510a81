import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import Polygon, box

from gqnepr.basis import (BasisMatrix, KnotGrid, bisquare_eval, build_basis_matrix, default_grid,
                          integrate_basis_over_area, read_geojson)
from gqnepr.dynamics import SpatialDomain

from oracles import grid_average_bisquare


def test_bisquare_closed_forms():
    knot = ((0.0, 0.0), 0.0)
    assert bisquare_eval((0.0, 0.0), 0.0, knot, 2.0) == 1.0
    assert bisquare_eval((2.0, 0.0), 0.0, knot, 2.0) == 0.0
    assert bisquare_eval((0.0, 0.0), 1.0, knot, 2.0) == pytest.approx(0.5625)
    assert bisquare_eval((3.0, 0.0), 0.0, knot, 2.0) == 0.0


def test_bisquare_continuous_at_range():
    knot = ((0.0, 0.0), 0.0)
    g = 1.7
    inside = bisquare_eval((g * (1 - 1e-9), 0.0), 0.0, knot, g)
    outside = bisquare_eval((g * (1 + 1e-9), 0.0), 0.0, knot, g)
    assert inside < 1e-15 and outside == 0.0


def test_bisquare_needs_positive_range():
    with pytest.raises(ValueError):
        bisquare_eval((0, 0), 0, ((0, 0), 0), 0.0)


def test_polygon_outside_range_gives_zero():
    poly = box(10, 10, 11, 11)
    assert integrate_basis_over_area(poly, 0.0, ((0.0, 0.0), 0.0), 2.0, n_mc=200, seed=1) == 0.0


def test_tiny_polygon_matches_point_value():
    s = np.array([0.4, -0.3])
    eps = 1e-5
    poly = box(s[0] - eps, s[1] - eps, s[0] + eps, s[1] + eps)
    knot = ((0.0, 0.0), 0.2)
    v = integrate_basis_over_area(poly, 0.5, knot, 1.5, n_mc=50, seed=0)
    assert abs(v - bisquare_eval(s, 0.5, knot, 1.5)) < 1e-3


def test_unit_square_matches_grid_quadrature():
    poly = box(-0.5, -0.5, 0.5, 0.5)
    knot = ((0.0, 0.0), 0.0)
    est, se = integrate_basis_over_area(poly, 0.0, knot, 10.0, n_mc=4000, seed=5, return_se=True)
    ref = grid_average_bisquare(np.array(poly.exterior.coords), 0.0, knot, 10.0)
    assert abs(est - ref) <= 3 * se + 1e-12


def test_degenerate_polygon_rejected():
    flat = Polygon([(0, 0), (1, 0), (2, 0)])
    with pytest.raises(ValueError):
        integrate_basis_over_area(flat, 0.0, ((0, 0), 0), 1.0)


def test_vertex_order_reversal_invariance():
    pts = [(0, 0), (2, 0.3), (1.7, 1.9), (0.2, 1.4)]
    knot = ((1.0, 1.0), 0.0)
    a, sa = integrate_basis_over_area(Polygon(pts), 0.0, knot, 1.5, n_mc=3000, seed=1, return_se=True)
    b, sb = integrate_basis_over_area(Polygon(pts[::-1]), 0.0, knot, 1.5, n_mc=3000, seed=2, return_se=True)
    assert abs(a - b) <= 3 * np.hypot(sa, sb)


def test_point_site_at_knot_has_unit_entry():
    dom = SpatialDomain.points([[0.5, 0.5]])
    grid = KnotGrid([[0.5, 0.5], [0.0, 0.0]], [1.0, 2.0], 0.3, standardize=False)
    bm = build_basis_matrix(dom, [1], grid)
    assert bm.G.shape == (1, 4)
    assert bm.G[0, 0] == 1.0  # spatial knot 0, temporal knot 0


def test_shape_for_areal_domain():
    rng = np.random.default_rng(0)
    polys = [box(x, y, x + 1, y + 1) for x, y in rng.uniform(0, 9, size=(67, 2))]
    dom = SpatialDomain.areal(polys)
    grid = KnotGrid.regular(((0, 10), (0, 10)), (1, 34), 20, 10)
    bm = build_basis_matrix(dom, range(1, 35), grid, n_mc=20, seed=0)
    assert bm.G.shape == (2278, 200)
    assert bm.row_index[0] == ("0", 1) and bm.row_index[67] == ("0", 2)


def test_lattice_grid_column_counts():
    dom = SpatialDomain.lattice(10, 10)
    for T, r in ((3, 388), (7, 776), (11, 1164), (15, 1552)):
        grid = default_grid(dom, range(1, T + 2), 97)
        assert grid.r == r
    assert default_grid(dom, range(1, 16), 15).r == 225


def test_regular_grid_staggered_rows_even_coverage():
    g = KnotGrid.regular(((0, 1), (0, 1)), (0, 1), 15, 3)
    ys = np.unique(g.spatial_knots[:, 1])
    counts = [int(np.sum(g.spatial_knots[:, 1] == y)) for y in ys]
    assert len(ys) == 4 and sorted(counts) == [3, 4, 4, 4]
    assert g.spatial_knots[:, 0].min() == 0 and g.spatial_knots[:, 0].max() == 1


def test_default_bandwidth_rule():
    g = KnotGrid.regular(((0, 9), (0, 9)), (1, 15), 16, 15)
    # spatial spacing 1/3 dominates temporal spacing 1/14 after scaling
    assert g.bandwidth == pytest.approx(1.5 / 3)


def test_entries_in_unit_interval_and_coverage_flag():
    dom = SpatialDomain.lattice(5, 5)
    grid = default_grid(dom, range(1, 6), 9)
    bm = build_basis_matrix(dom, range(1, 6), grid)
    assert bm.G.min() >= 0 and bm.G.max() <= 1
    assert not bm.uncovered.any()


def test_time_outside_knots_warns():
    dom = SpatialDomain.lattice(2, 2)
    grid = KnotGrid.regular(((1, 2), (1, 2)), (1, 3), 4, 3, bandwidth=0.3)
    with pytest.warns(UserWarning):
        bm = build_basis_matrix(dom, [1, 10], grid)
    assert bm.uncovered[4:].all()


def test_build_is_deterministic_for_areal():
    polys = [box(0, 0, 1, 1), Polygon([(1, 0), (2, 0), (1.5, 1)])]
    dom = SpatialDomain.areal(polys)
    grid = default_grid(dom, [1, 2], 2, 2)
    a = build_basis_matrix(dom, [1, 2], grid, n_mc=100, seed=4).G
    b = build_basis_matrix(dom, [1, 2], grid, n_mc=100, seed=4).G
    assert np.array_equal(a, b)


def test_csv_roundtrip(tmp_path):
    dom = SpatialDomain.lattice(3, 3)
    grid = default_grid(dom, [1, 2, 3], 4)
    bm = build_basis_matrix(dom, [1, 2, 3], grid)
    bm.to_csv(tmp_path / "basis.csv")
    side = json.loads((tmp_path / "basis.json").read_text())
    assert side["coordinate_standardization"] is True
    back = BasisMatrix.from_csv(tmp_path / "basis.csv")
    assert np.array_equal(back.G, bm.G) and back.row_index == bm.row_index
    assert np.array_equal(back.knot_grid.spatial_knots, grid.spatial_knots)


def test_read_geojson(tmp_path):
    fc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"name": "a"},
         "geometry": {"type": "Polygon", "coordinates": [[[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]]]}},
        {"type": "Feature", "properties": {"name": "b"},
         "geometry": {"type": "MultiPolygon",
                      "coordinates": [[[[2, 0], [3, 0], [3, 1], [2, 0]]]]}}]}
    path = tmp_path / "a.geojson"
    path.write_text(json.dumps(fc))
    polys, ids = read_geojson(path, "name")
    assert ids == ["a", "b"] and polys[0].area == 1.0


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 5.0), st.floats(0.0, 1.0))
def test_property_bisquare_bounded_and_monotone(gamma, frac):
    knot = ((0.0, 0.0), 0.0)
    v1 = bisquare_eval((frac * gamma, 0.0), 0.0, knot, gamma)
    v2 = bisquare_eval((min(1.0, frac + 0.1) * gamma, 0.0), 0.0, knot, gamma)
    assert 0.0 <= v2 <= v1 <= 1.0
