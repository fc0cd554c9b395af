import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planecalib.cloud import CloudConfig, PlanePatch, PointCloud, build_index, fit_plane, plane_validity, query_patches
from planecalib.errors import DegenerateNeighborhood, EmptyCloud
from planecalib.geometry import Se3, axis_angle_quat, transform


def test_single_point_index():
    idx = build_index(PointCloud([[1.0, 2.0, 3.0]]))
    d, i = idx.knn([[10.0, -4.0, 0.0]], 1)
    assert i[0, 0] == 0
    assert d[0, 0] == pytest.approx(np.linalg.norm([9.0, -6.0, -3.0]))


def test_grid_node_query_has_zero_distance():
    g = np.stack(np.meshgrid(np.arange(5.0), np.arange(5.0), np.arange(3.0)), -1).reshape(-1, 3)
    d, _ = build_index(PointCloud(g)).knn(g[17:18], 1)
    assert d[0, 0] == 0.0


@settings(max_examples=25, deadline=None)
@given(n=st.integers(5, 2000), k=st.integers(1, 5), seed=st.integers(0, 2**31))
def test_knn_matches_brute_force(n, k, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    q = rng.normal(size=(20, 3))
    d, i = build_index(PointCloud(pts)).knn(q, k)
    brute = np.sort(np.linalg.norm(q[:, None] - pts[None], axis=-1), axis=1)[:, :k]
    np.testing.assert_allclose(d, brute, atol=1e-12)


def test_knn_matches_brute_force_ten_thousand_points():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-10, 10, size=(10_000, 3))
    q = rng.uniform(-10, 10, size=(50, 3))
    d, i = build_index(PointCloud(pts)).knn(q, 5)
    full = np.linalg.norm(q[:, None] - pts[None], axis=-1)
    np.testing.assert_array_equal(i, np.argsort(full, axis=1)[:, :5])


def test_radius_limit_marks_missing_neighbours():
    idx = build_index(PointCloud([[0.0, 0, 0], [5.0, 0, 0]]))
    d, i = idx.knn([[0.1, 0, 0]], 2, max_radius=1.0)
    assert np.isinf(d[0, 1]) and i[0, 1] == len(idx)


def test_empty_cloud_rejected():
    with pytest.raises(EmptyCloud):
        build_index(PointCloud(np.zeros((0, 3))))


def test_exact_plane_fit():
    rng = np.random.default_rng(0)
    pts = np.c_[rng.uniform(-1, 1, (10, 2)), np.zeros(10)]
    patch = fit_plane(pts)
    np.testing.assert_allclose(np.abs(patch.normal), [0, 0, 1], atol=1e-12)
    assert patch.eigenvalues[2] <= 1e-15
    assert abs(np.linalg.norm(patch.normal) - 1) < 1e-12
    assert np.all(np.diff(patch.eigenvalues) <= 0)


def test_noisy_plane_fit():
    rng = np.random.default_rng(1)
    pts = np.c_[rng.uniform(-1, 1, (400, 2)), rng.uniform(-0.01, 0.01, 400)]
    patch = fit_plane(pts)
    angle = np.degrees(np.arccos(min(1.0, abs(patch.normal[2]))))
    assert angle < 2.0
    # uniform noise on [-a, a] has variance a^2 / 3
    assert 0.3 * (0.01**2 / 3) < patch.eigenvalues[2] < 3 * (0.01**2 / 3)


def test_three_points_define_a_plane():
    patch = fit_plane([[0.0, 0, 0], [1.0, 0.2, 0.1], [0.3, 1.0, -0.4]])
    assert abs(patch.eigenvalues[2]) < 1e-15


def test_degenerate_neighbourhoods():
    with pytest.raises(DegenerateNeighborhood):
        fit_plane([[0.0, 0, 0], [1.0, 0, 0]])
    with pytest.raises(DegenerateNeighborhood):
        fit_plane(np.ones((6, 3)))


def test_plane_validity_examples():
    flat = PlanePatch(np.array([0, 0, 1.0]), np.zeros(3), np.array([1.0, 0.5, 0.0]), 10)
    assert plane_validity(flat, 1e12)
    assert plane_validity(PlanePatch(np.array([0, 0, 1.0]), np.zeros(3), np.array([4.0, 2.0, 0.1]), 10), 10)
    blob = fit_plane(np.random.default_rng(2).normal(size=(2000, 3)))
    assert not plane_validity(blob, 10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_fit_is_rigid_equivariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 3)) * [2.0, 1.0, 0.2]
    T = Se3(axis_angle_quat(rng.normal(size=3), rng.uniform(0, np.pi)), rng.uniform(-5, 5, 3))
    a = fit_plane(pts)
    b = fit_plane(transform(T, pts))
    np.testing.assert_allclose(b.eigenvalues, a.eigenvalues, atol=1e-9)
    np.testing.assert_allclose(b.centroid, transform(T, a.centroid), atol=1e-9)
    rotated = T.R @ a.normal
    assert min(np.linalg.norm(b.normal - rotated), np.linalg.norm(b.normal + rotated)) < 1e-9


def test_query_patches_on_plane_and_far_away():
    rng = np.random.default_rng(4)
    plane = np.c_[rng.uniform(-2, 2, (2000, 2)), np.zeros(2000)]
    idx = build_index(PointCloud(plane))
    res = query_patches(idx, [[0.0, 0.0, 0.05], [0.0, 0.0, 50.0]], CloudConfig())
    assert res.valid.tolist() == [True, False]
    assert res.distances[0] == pytest.approx(0.05, abs=1e-12)
    assert np.isnan(res.distances[1])
