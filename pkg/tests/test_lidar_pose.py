import numpy as np
import pytest

from planecalib.cloud import CloudConfig, PointCloud, build_index
from planecalib.errors import InsufficientOverlap
from planecalib.geometry import Se3, axis_angle_quat, compose, inverse, rotation_angle_between
from planecalib.lidar_pose import (
    IcpConfig,
    LidarTrajectory,
    PointToPlaneTerm,
    RefineConfig,
    ScanPairTerm,
    estimate_trajectory,
    icp_point_to_plane,
    refine_trajectory,
    trajectory_cost,
)
from planecalib.solver import Family, Problem, check_jacobian


def pose_error(a: Se3, b: Se3):
    return rotation_angle_between(a, b), float(np.linalg.norm(a.translation - b.translation))


def test_icp_on_identical_clouds_returns_identity(courtyard_noiseless):
    # Exact planar samples plus a strict planarity test (which rejects the
    # few neighbourhoods straddling two planes) make every residual vanish.
    cloud = courtyard_noiseless.clouds[0]
    cfg = IcpConfig(cloud=CloudConfig(ratio_threshold=1e8))
    res = icp_point_to_plane(cloud, build_index(cloud), cfg=cfg)
    rot, trans = pose_error(res.pose, Se3.identity())
    assert np.radians(rot) < 1e-9 and trans < 1e-9
    assert res.converged


def test_icp_recovers_known_transform(courtyard):
    source = courtyard.clouds[0]
    T = Se3(axis_angle_quat([0.2, 0.3, 1.0], np.radians(20)), [0.7, -0.4, 0.1])
    target = PointCloud(T.transform(source.points))
    start = compose(Se3(axis_angle_quat([1.0, -0.5, 0.3], np.radians(5)), [0.2, 0.15, -0.15]), T)
    res = icp_point_to_plane(source, build_index(target), start)
    rot, trans = pose_error(res.pose, T)
    assert rot < 0.05 and trans < 0.005


def test_icp_between_consecutive_scans(courtyard):
    ds = courtyard
    L0, L1 = ds.gt_lidar_poses[0], ds.gt_lidar_poses[1]
    truth = compose(L0, inverse(L1))  # scan 1 -> scan 0
    res = icp_point_to_plane(ds.clouds[1], build_index(ds.clouds[0]), Se3(truth.rotation))
    rot, trans = pose_error(res.pose, truth)
    assert rot < 0.05 and trans < 0.005


def test_disjoint_clouds_raise():
    rng = np.random.default_rng(0)
    a = PointCloud(np.c_[rng.uniform(0, 5, (2000, 2)), np.zeros(2000)])
    b = PointCloud(np.c_[rng.uniform(0, 5, (2000, 2)), np.zeros(2000)] + [100.0, 0, 0])
    with pytest.raises(InsufficientOverlap):
        icp_point_to_plane(a, build_index(b))


def test_single_scan_refinement_is_identity(courtyard):
    out = refine_trajectory(courtyard.clouds[:1], LidarTrajectory([Se3.identity()]))
    assert len(out) == 1 and out.poses[0].is_identity()


def test_first_pose_must_be_identity():
    with pytest.raises(ValueError):
        LidarTrajectory([Se3.exp([0, 0, 0.1])])


def test_refinement_reduces_drift(courtyard):
    ds = courtyard
    scans = ds.clouds[:5]
    gt = ds.gt_lidar_poses[:5]
    rng = np.random.default_rng(1)
    drifted = [gt[0]] + [compose(Se3.exp(rng.normal(scale=np.radians(0.5), size=3), rng.normal(scale=0.03, size=3)), T) for T in gt[1:]]
    initial = LidarTrajectory(drifted)
    cfg = RefineConfig()
    out = refine_trajectory(scans, initial, cfg)
    assert out.poses[0].is_identity()
    assert trajectory_cost(scans, out, cfg) < trajectory_cost(scans, initial, cfg)
    for before, after, truth in zip(drifted[1:], out.poses[1:], gt[1:]):
        rb, tb = pose_error(before, truth)
        ra, ta = pose_error(after, truth)
        assert ra <= rb and ta <= tb


def test_refining_an_optimum_changes_nothing(courtyard):
    scans = courtyard.clouds[:3]
    cfg = RefineConfig()
    once = refine_trajectory(scans, LidarTrajectory(courtyard.gt_lidar_poses[:3]), cfg)
    twice = refine_trajectory(scans, once, cfg)
    c1, c2 = trajectory_cost(scans, once, cfg), trajectory_cost(scans, twice, cfg)
    assert abs(c1 - c2) <= 1e-10 * c1


def test_estimated_trajectory_matches_ground_truth(courtyard):
    ds = courtyard
    guesses = [None] + [Se3(compose(ds.gt_lidar_poses[i - 1], inverse(ds.gt_lidar_poses[i])).rotation) for i in range(1, ds.n_frames)]
    traj = estimate_trajectory(ds.clouds, guesses)
    assert traj.converged and traj.poses[0].is_identity()
    for est, truth in zip(traj.poses, ds.gt_lidar_poses):
        rot, trans = pose_error(est, truth)
        assert rot < 0.1 and trans < 0.01


def test_point_to_plane_jacobians():
    rng = np.random.default_rng(2)
    n = rng.normal(size=(40, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    P = Problem()
    P.add_family(Family("pose", Se3.exp(rng.normal(size=3), rng.normal(size=3)).as_array()[None], kind="se3"))
    term = P.add_term(PointToPlaneTerm(rng.normal(size=(40, 3)), n, rng.normal(size=(40, 3))))
    assert check_jacobian(P, term) < 1e-5


def test_scan_pair_jacobians():
    rng = np.random.default_rng(3)
    poses = np.stack([Se3.exp(rng.normal(size=3), rng.normal(size=3)).as_array() for _ in range(3)])
    n = rng.normal(size=(30, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    src = rng.integers(0, 3, 30)
    tgt = (src + 1) % 3
    P = Problem()
    P.add_family(Family("poses", poses, kind="se3"))
    term = P.add_term(ScanPairTerm(src, tgt, rng.normal(size=(30, 3)), n, rng.normal(size=(30, 3))))
    assert check_jacobian(P, term) < 1e-5
