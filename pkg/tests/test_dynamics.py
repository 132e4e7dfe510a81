import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from gqnepr.dynamics import (DynamicsSpec, FieldSeries, GqnParams, SparseTensor3, SpatialDomain,
                             build_gqn_spec, build_reaction_diffusion, g_transform, gqn_step,
                             load_spec, save_spec, simulate_series, var1_step)

from oracles import dense_gqn_step


def scalar_spec(a, b, gamma0, gamma1):
    B = SparseTensor3(1, [0], [0], [0], [b]) if b else SparseTensor3.empty(1)
    return DynamicsSpec(np.array([[a]]), B, gamma0, gamma1, np.zeros((1, 1)), np.zeros((1, 1)))


def test_gqn_scalar_hand_value():
    spec = scalar_spec(0.0, 1.0, 0.05, 10.0)
    out = gqn_step(np.array([2.0]), spec, np.zeros(1))
    assert out[0] == pytest.approx(2 * 0.05 * math.exp(0.8), rel=1e-14)
    assert out[0] == pytest.approx(0.22255409, abs=1e-8)


def test_var1_hand_value():
    A = np.array([[0.5, 0.1], [0.0, 0.4]])
    assert np.allclose(var1_step(np.array([1.0, 1.0]), A, np.zeros(2)), [0.6, 0.4])
    assert np.allclose(var1_step(np.array([1.0, 1.0]), A, np.array([0.1, 0.0])), [0.7, 0.4])


def test_gqn_step_matches_dense_triple_loop():
    rng = np.random.default_rng(3)
    n = 6
    A = rng.normal(size=(n, n)) * 0.2
    Bd = rng.normal(size=(n, n, n)) * (rng.random((n, n, n)) < 0.3)
    i, k, l = np.nonzero(Bd)
    spec = DynamicsSpec(A, SparseTensor3(n, i, k, l, Bd[i, k, l]), 0.05, 10.0,
                        np.eye(n), np.eye(n))
    u, eta = rng.normal(size=n), rng.normal(size=n)
    assert np.allclose(gqn_step(u, spec, eta), dense_gqn_step(u, A, Bd, 0.05, 10.0, eta), atol=1e-12)


def test_empty_B_reduces_to_var1_bitwise():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 30))
        A = rng.normal(size=(n, n))
        spec = DynamicsSpec(A, SparseTensor3.empty(n), 0.01, 25.0, np.eye(n), np.eye(n))
        u, eta = rng.normal(size=n), rng.normal(size=n)
        assert np.array_equal(gqn_step(u, spec, eta), var1_step(u, spec.A, eta))


def test_g_transform_rejects_nonpositive_capacity():
    with pytest.raises(ValueError):
        g_transform(1.0, 0.1, 0.0)
    assert g_transform(10.0, 0.05, 10.0) == pytest.approx(0.05)


def test_duplicate_tensor_entries_accumulate():
    B = SparseTensor3(2, [0, 0], [1, 1], [1, 1], [0.5, 0.25])
    assert B.to_dense()[0, 1, 1] == 0.75


def test_step_shape_errors():
    spec = scalar_spec(0.5, 0.0, 0.1, 1.0)
    with pytest.raises(ValueError):
        gqn_step(np.zeros(2), spec, np.zeros(1))


def test_reaction_diffusion_interior_constant_delta():
    dom = SpatialDomain.lattice(5, 6, spacing=(0.5, 2.0))
    delta, g0, g1, dt = 0.03, 0.2, 4.0, 0.1
    spec = build_reaction_diffusion(dom, delta, g0, g1, dt=dt)
    A = spec.A.toarray()
    c1, c2 = dt / 0.25, dt / 4.0
    i = 2 * 6 + 3
    assert A[i, i] == 1 - 2 * delta * (c1 + c2) + dt * g0
    assert A[i, i + 1] == c1 * delta and A[i, i - 1] == c1 * delta
    assert A[i, i + 6] == c2 * delta and A[i, i - 6] == c2 * delta
    assert np.count_nonzero(A[i]) == 5
    assert spec.B.to_dense()[i, i, i] == -dt * g0 / g1
    assert spec.g_kind == "identity"


def test_reaction_diffusion_boundary_and_gradient():
    dom = SpatialDomain.lattice(3, 3)
    delta = np.arange(9, dtype=float) * 0.01
    spec = build_reaction_diffusion(dom, delta, 0.0, 1.0)
    A = spec.A.toarray()
    # corner site 0 has only east and north neighbours
    assert np.count_nonzero(A[0]) == 3
    # centre site 4: east weight uses the centred difference (delta5 - delta3) / 4
    assert A[4, 5] == pytest.approx(delta[4] + (delta[5] - delta[3]) / 4)
    assert A[4, 3] == pytest.approx(delta[4] - (delta[5] - delta[3]) / 4)


def test_reaction_diffusion_requires_lattice():
    dom = SpatialDomain.points(np.zeros((2, 2)) + [[0, 0], [1, 1]])
    with pytest.raises(ValueError):
        build_reaction_diffusion(dom, 0.1, 0.1, 1.0)


def test_simulate_shapes_and_determinism():
    dom = SpatialDomain.lattice(4, 4)
    spec = build_gqn_spec(dom, GqnParams.gaussian_study(), 1)
    a = simulate_series(spec, 5, 9)
    b = simulate_series(spec, 5, 9)
    assert a.values.shape == (16, 6)
    assert np.array_equal(a.values, b.values)
    c = simulate_series(spec, 5, 9, include_initial=False)
    assert list(c.times) == [1, 2, 3, 4, 5]
    assert np.array_equal(c.values, a.values[:, 1:])


def test_zero_noise_zero_initial_stays_zero():
    dom = SpatialDomain.lattice(3, 3)
    spec = build_reaction_diffusion(dom, 0.1, 0.1, 5.0)
    assert np.all(simulate_series(spec, 4, 0).values == 0.0)


def test_stacked_order_sites_fastest():
    dom = SpatialDomain.lattice(1, 2)
    fs = FieldSeries(np.array([[1.0, 3.0], [2.0, 4.0]]), dom)
    assert list(fs.stacked()) == [1.0, 2.0, 3.0, 4.0]


def test_field_series_csv_roundtrip(tmp_path):
    dom = SpatialDomain.lattice(2, 3)
    fs = FieldSeries(np.random.default_rng(1).normal(size=(6, 3)), dom, [1, 2, 3])
    fs.to_csv(tmp_path / "f.csv")
    back = FieldSeries.from_csv(tmp_path / "f.csv", dom)
    assert np.array_equal(back.values, fs.values) and list(back.times) == [1, 2, 3]


def test_spec_toml_roundtrip(tmp_path):
    dom = SpatialDomain.lattice(3, 3)
    spec = build_gqn_spec(dom, GqnParams.adjacency_study(), 2)
    save_spec(spec, tmp_path / "s.toml")
    back = load_spec(tmp_path / "s.toml")
    u, eta = np.linspace(-1, 1, 9), np.zeros(9)
    assert np.allclose(gqn_step(u, back, eta), gqn_step(u, spec, eta))


def test_adjacency_study_structure():
    dom = SpatialDomain.lattice(10, 10)
    spec = build_gqn_spec(dom, GqnParams.adjacency_study(), 0)
    A = spec.A.toarray()
    assert np.all(np.diag(A) == 0.14)
    assert np.count_nonzero(A[55]) == 5  # self + four neighbours
    assert spec.B.nnz == 100


def test_var1_target_has_empty_B():
    dom = SpatialDomain.lattice(4, 4)
    p = GqnParams.gaussian_study()
    p.nu = 0.0
    assert build_gqn_spec(dom, p, 0).B.nnz == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_property_empty_B_equals_linear(n, seed):
    rng = np.random.default_rng(seed)
    A = sp.random(n, n, density=0.4, random_state=seed, format="csr")
    spec = DynamicsSpec(A, SparseTensor3.empty(n), 0.5, 2.0, np.eye(n), np.eye(n))
    u, eta = rng.normal(size=n), rng.normal(size=n)
    assert np.array_equal(gqn_step(u, spec, eta), var1_step(u, spec.A, eta))


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 1.0), st.floats(0.5, 50.0))
def test_property_quadratic_scalar_closed_form(u, g0, g1):
    spec = scalar_spec(0.3, 0.7, g0, g1)
    out = gqn_step(np.array([u]), spec, np.zeros(1))[0]
    assert out == pytest.approx(0.3 * u + 0.7 * u * g0 * math.exp(1 - u / g1), rel=1e-12, abs=1e-12)
