import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planecalib.cloud import build_index
from planecalib.errors import DegenerateProblem, NoValidPairs, ZeroVariance
from planecalib.geometry import CameraIntrinsics, Se3, axis_angle_quat, compose, inverse
from planecalib.joint import (
    CalibrationProblem,
    JointConfig,
    PairSet,
    PointPlaneTerm,
    _joint_problem,
    build_correspondences,
    diagnose_normals,
    point_to_plane_residual,
    reprojection_residual,
    solve_joint,
)
from planecalib.solver import Family, Problem, _Layout, _linearize, check_jacobian
from planecalib.visual_ba import FeatureTrack, ReprojectionTerm, whitening


def problem_at_truth(ds, sigma_p=0.01):
    covs = np.tile(sigma_p**2 * np.eye(3), (len(ds.tracks), 1, 1))
    return CalibrationProblem(
        ds.gt_intrinsics, ds.gt_extrinsics, list(ds.gt_camera_poses), ds.gt_points.copy(), covs, ds.tracks, list(ds.gt_lidar_poses)
    )


@pytest.fixture(scope="module")
def indices(courtyard):
    return [build_index(c) for c in courtyard.clouds]


def single_point_problem(p, cov=np.eye(3), pose=None, X=None, pixel_cov=np.eye(2)):
    D = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
    pose = pose or Se3.identity()
    track = FeatureTrack(0, np.array([0, 1]), np.array([[330.0, 250.0], [300.0, 200.0]]), np.stack([pixel_cov, pixel_cov]))
    poses = [Se3.identity(), pose]
    return CalibrationProblem(D, X or Se3.identity(), poses, [p], [cov], [track], [Se3.identity(), Se3.identity()])


def test_correspondences_at_truth_use_the_generating_plane(courtyard, indices):
    ds = courtyard
    prob = problem_at_truth(ds)
    pairs, rep = build_correspondences(prob, indices, JointConfig(distance_threshold=0.1))
    assert rep.distance_rejected == 0
    assert rep.valid == len(pairs) > 0
    inliers = np.flatnonzero(~ds.track_is_outlier)
    assert set(pairs.point.tolist()) == set(inliers.tolist())
    X_inv = inverse(ds.gt_extrinsics)
    for i in range(ds.n_frames):
        sel = pairs.frame == i
        to_scene = compose(ds.camera_to_scene[i], X_inv)
        q = to_scene.transform(pairs.centroid[sel])
        for k in np.unique(ds.track_plane_ids[pairs.point[sel]]):
            own = ds.track_plane_ids[pairs.point[sel]] == k
            assert np.max(ds.spec.planes[k].distance_to_rectangle(q[own])) < 0.05


def test_gross_outlier_is_discarded(courtyard, indices):
    ds = courtyard
    prob = problem_at_truth(ds)
    prob.points[5] += 1.0 * ds.spec.planes[ds.track_plane_ids[5]].normal @ ds.camera_to_scene[0].R
    _, rep = build_correspondences(prob, indices)
    assert ds.tracks[5].point_id in rep.discarded_points
    assert not prob.active[5]


def test_no_points_means_no_pairs(courtyard, indices):
    prob = problem_at_truth(courtyard)
    prob.active[:] = False
    with pytest.raises(NoValidPairs):
        build_correspondences(prob, indices)


def test_point_on_plane_has_zero_residual():
    prob = single_point_problem([0.0, 0.0, 5.0])
    d, v = point_to_plane_residual(prob, 0, 0, [0.0, 0.0, 1.0], [3.0, -1.0, 5.0])
    assert d == 0.0 and v == 1.0


def test_point_to_plane_contribution_example():
    prob = single_point_problem([0.0, 0.0, 7.0])
    d, v = point_to_plane_residual(prob, 0, 0, [0.0, 0.0, 1.0], [0.0, 0.0, 5.0])
    assert 0.5 * d * d / v == 2.0


def test_zero_variance_along_normal():
    cov = np.diag([1.0, 1.0, 0.0])
    prob = single_point_problem([0.0, 0.0, 7.0], cov=cov)
    with pytest.raises(ZeroVariance):
        point_to_plane_residual(prob, 0, 0, [0.0, 0.0, 1.0], [0.0, 0.0, 5.0])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_residual_and_variance_survive_a_rig_rotation(seed):
    # rotate the camera world: points, covariances and poses move together
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    cov = A @ A.T + 0.1 * np.eye(3)
    p = rng.normal(size=3) + [0, 0, 6]
    pose = Se3(axis_angle_quat(rng.normal(size=3), 0.3), rng.normal(size=3))
    X = Se3(axis_angle_quat(rng.normal(size=3), 2.0), rng.normal(size=3))
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    q = rng.normal(size=3)
    base = point_to_plane_residual(single_point_problem(p, cov, pose, X), 0, 1, n, q)
    W = Se3(axis_angle_quat(rng.normal(size=3), rng.uniform(0, np.pi)))
    moved = single_point_problem(W.transform(p), W.R @ cov @ W.R.T, compose(pose, inverse(W)), X)
    np.testing.assert_allclose(point_to_plane_residual(moved, 0, 1, n, q), base, rtol=1e-9, atol=1e-12)
    # a rigid change of LiDAR coordinates applied to planes and extrinsics
    G = Se3(axis_angle_quat(rng.normal(size=3), rng.uniform(0, np.pi)), rng.normal(size=3))
    regauged = single_point_problem(p, cov, pose, compose(G, X))
    np.testing.assert_allclose(point_to_plane_residual(regauged, 0, 1, G.R @ n, G.transform(q)), base, rtol=1e-9, atol=1e-12)


def test_reprojection_residual_and_weight():
    unit = single_point_problem([0.02, 0.02, 1.0])
    r, W = reprojection_residual(unit, 0, 0)
    np.testing.assert_allclose(r, [0.0, 0.0], atol=1e-12)
    r1, W1 = reprojection_residual(single_point_problem([0.0, 0.0, 1.0]), 0, 0)
    r4, W4 = reprojection_residual(single_point_problem([0.0, 0.0, 1.0], pixel_cov=4 * np.eye(2)), 0, 0)
    np.testing.assert_array_equal(r1, r4)
    assert r4 @ W4 @ r4 == pytest.approx(0.25 * (r1 @ W1 @ r1), rel=1e-15)
    with pytest.raises(KeyError):
        reprojection_residual(unit, 0, 5)


def test_noiseless_truth_has_zero_reprojection(courtyard_noiseless):
    prob = problem_at_truth(courtyard_noiseless)
    for j in (0, 10, 100):
        for i in prob.tracks[j].frames[:2]:
            r, _ = reprojection_residual(prob, j, int(i))
            assert np.max(np.abs(r)) < 1e-9


def test_focal_sensitivity(distorted):
    p = np.array([0.8, -0.5, 4.0])
    prob = single_point_problem(p)
    prob.intrinsics = distorted
    base, _ = reprojection_residual(prob, 0, 0)
    D = distorted
    prob.intrinsics = CameraIntrinsics(D.fx * 1.01, D.fy, D.cx, D.cy, D.k1, D.k2, D.width, D.height)
    bumped, _ = reprojection_residual(prob, 0, 0)
    xn = p[:2] / p[2]
    r2 = xn @ xn
    xd = xn[0] * (1 + D.k1 * r2 + D.k2 * r2 * r2)
    assert bumped[0] - base[0] == pytest.approx(-0.01 * D.fx * xd, rel=1e-9)
    assert bumped[1] == base[1]


def test_point_plane_jacobians():
    rng = np.random.default_rng(4)
    npts, nfr, m = 20, 4, 80
    A = rng.normal(size=(npts, 3, 3))
    covs = A @ np.swapaxes(A, 1, 2) + 0.1 * np.eye(3)
    n = rng.normal(size=(m, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    P = Problem()
    P.add_family(Family("extrinsics", Se3.exp(rng.normal(size=3), rng.normal(size=3)).as_array()[None], kind="se3"))
    P.add_family(Family("poses", np.stack([Se3.exp(rng.normal(size=3), rng.normal(size=3)).as_array() for _ in range(nfr)]), kind="se3"))
    P.add_family(Family("points", rng.normal(size=(npts, 3))))
    term = P.add_term(PointPlaneTerm(rng.integers(0, npts, m), rng.integers(0, nfr, m), n, rng.normal(size=(m, 3)), covs))
    assert check_jacobian(P, term) < 1e-5


def test_joint_reprojection_jacobians(distorted):
    rng = np.random.default_rng(5)
    P = Problem()
    P.add_family(Family("intrinsics", distorted.as_array()[None]))
    P.add_family(Family("poses", np.stack([Se3.exp(0.1 * rng.normal(size=3), rng.normal(size=3)).as_array() for _ in range(3)]), kind="se3"))
    P.add_family(Family("points", rng.uniform([-1, -1, 5], [1, 1, 8], size=(30, 3))))
    fr = rng.integers(0, 3, 100)
    cov = np.tile(np.diag([0.25, 0.5]), (100, 1, 1))
    term = P.add_term(ReprojectionTerm(fr, rng.integers(0, 30, 100), rng.uniform(0, 640, (100, 2)), whitening(cov)))
    assert check_jacobian(P, term) < 1e-5


def test_noiseless_truth_is_a_fixed_point(courtyard_noiseless):
    ds = courtyard_noiseless
    prob = problem_at_truth(ds)
    res = solve_joint(prob, [build_index(c) for c in ds.clouds])
    assert res.report.iterations <= 1
    assert res.report.final_cost < 1e-12
    np.testing.assert_allclose(res.extrinsics.as_array(), ds.gt_extrinsics.as_array(), atol=1e-8)
    np.testing.assert_allclose(res.intrinsics.as_array(), ds.gt_intrinsics.as_array(), atol=1e-8)
    np.testing.assert_allclose(res.points, ds.gt_points, atol=1e-8)
    assert res.camera_poses[0].is_identity()


def test_zero_alpha_leaves_extrinsics_alone(courtyard, indices):
    ds = courtyard
    prob = problem_at_truth(ds)
    prob.extrinsics = compose(Se3.exp([0.01, 0.0, -0.02], [0.05, 0.0, 0.0]), ds.gt_extrinsics)
    start = prob.extrinsics
    res = solve_joint(prob, indices, JointConfig(alpha=0.0, rebuild_every=0))
    np.testing.assert_array_equal(res.extrinsics.as_array(), start.as_array())
    assert res.report.iterations > 0


def test_alpha_scales_the_plane_cost(courtyard, indices):
    ds = courtyard
    prob = problem_at_truth(ds)
    prob.points = prob.points + np.random.default_rng(0).normal(scale=0.01, size=prob.points.shape)
    prob.pairs, _ = build_correspondences(prob, indices)
    costs = {}
    for a in (1.0, 3.5):
        prob.alpha = a
        costs[a] = _joint_problem(prob, JointConfig(alpha=a)).term_costs()
    assert costs[3.5]["point_to_plane"] == pytest.approx(3.5 * costs[1.0]["point_to_plane"], rel=1e-14)
    assert costs[3.5]["reprojection"] == costs[1.0]["reprojection"]


def test_gradient_vanishes_at_the_minimiser(courtyard, indices):
    prob = problem_at_truth(courtyard)
    cfg = JointConfig(rebuild_every=0, function_tolerance=0.0, gradient_tolerance=1e-9)
    solve_joint(prob, indices, cfg)
    P = _joint_problem(prob, cfg)
    _, r, J = _linearize(P, _Layout(P), P.values())
    g = np.abs(J.T @ r)
    # stationarity relative to the size of the individual gradient contributions
    assert np.max(g) / np.max(abs(J).T @ np.abs(r)) < 1e-8


def test_retained_points_stay_within_threshold(courtyard, indices):
    ds = courtyard
    prob = problem_at_truth(ds)
    prob.points = prob.points + np.random.default_rng(1).normal(scale=0.02, size=prob.points.shape)
    cfg = JointConfig()
    solve_joint(prob, indices, cfg)
    pairs, rep = build_correspondences(prob, indices, cfg, discard=False)
    assert rep.discarded_points == []
    assert set(np.flatnonzero(prob.active)) <= set(pairs.point.tolist())


def test_orthogonal_normals_are_well_constrained():
    d = diagnose_normals(np.eye(3))
    assert d.status == "well_constrained"
    assert d.ratio == pytest.approx(1.0)


def test_single_normal_direction_is_degenerate():
    rng = np.random.default_rng(0)
    n = np.tile([0.0, 0.0, 1.0], (50, 1)) * rng.choice([-1.0, 1.0], (50, 1))
    d = diagnose_normals(n)
    assert d.degenerate
    assert abs(d.weak_direction @ [0, 0, 1]) < 1e-12


def test_two_normal_directions_leave_their_cross_product():
    a = np.array([1.0, 0.2, 0.0])
    b = np.array([0.1, -0.3, 1.0])
    n = np.r_[np.tile(a / np.linalg.norm(a), (30, 1)), np.tile(b / np.linalg.norm(b), (20, 1))]
    d = diagnose_normals(n)
    assert d.degenerate
    c = np.cross(a, b)
    assert abs(abs(d.weak_direction @ c) / np.linalg.norm(c) - 1) < 1e-12


def test_empty_normals():
    with pytest.raises(NoValidPairs):
        diagnose_normals(np.zeros((0, 3)))


def test_degenerate_problem_is_refused(courtyard, indices):
    prob = problem_at_truth(courtyard)
    pairs, _ = build_correspondences(prob, indices)
    keep = PairSet.select(pairs, courtyard.track_plane_ids[pairs.point] == courtyard.track_plane_ids[pairs.point[0]])
    prob.pairs = keep
    with pytest.raises(DegenerateProblem) as info:
        solve_joint(prob, indices)
    assert info.value.ratio < 1e-3
