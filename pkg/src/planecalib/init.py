"""Monocular scale recovery and coarse scale + extrinsic refinement against LiDAR planes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cloud import CloudConfig, query_patches
from .errors import DegenerateMotion, NoValidPairs
from .geometry import Se3, quat_to_matrix, rotation_angle_between
from .solver import CostTerm, Family, Problem, RobustLoss, SolverConfig, solve_lm

log = logging.getLogger(__name__)

MIN_TRANSLATION = 1e-6


@dataclass
class InitConfig:
    max_rounds: int = 10
    tolerance: float = 1e-5
    huber_delta: float = 0.05
    max_distance: float = 1.0
    scale_normalized: bool = True
    cloud: CloudConfig = field(default_factory=CloudConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)


@dataclass
class InitRound:
    scale: float
    extrinsics: Se3
    cost: float
    valid_pairs: int


@dataclass
class ScaledInit:
    scale: float
    extrinsics: Se3
    iteration_log: list = field(default_factory=list)
    converged: bool = True
    camera_poses: Optional[list] = None
    points: Optional[np.ndarray] = None
    covariances: Optional[np.ndarray] = None
    pair_normals_camera: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def scale_system(camera_poses, lidar_poses, extrinsics: Se3):
    """Stacked ``a s = b`` rows: ``s R_X t_Ci = t_Li - (I - R_Li) t_X`` for frames ``i >= 1``."""
    RX, tX = extrinsics.R, extrinsics.translation
    a, b = [], []
    for C, L in zip(camera_poses[1:], lidar_poses[1:]):
        a.append(RX @ C.translation)
        b.append(L.translation - (np.eye(3) - L.R) @ tX)
    return np.concatenate(a), np.concatenate(b)


def recover_scale(camera_poses, lidar_poses, extrinsics: Se3):
    """Least-squares visual scale from paired trajectories; returns ``(scale, residual_rms)``."""
    if len(camera_poses) != len(lidar_poses):
        raise ValueError("camera and LiDAR trajectories differ in length")
    if len(camera_poses) < 2:
        raise DegenerateMotion("scale recovery needs at least two frames")
    if max(np.linalg.norm(C.translation) for C in camera_poses[1:]) <= MIN_TRANSLATION:
        raise DegenerateMotion("camera translations are all near zero; the scale is unobservable")
    a, b = scale_system(camera_poses, lidar_poses, extrinsics)
    s = float(a @ b / (a @ a))
    rms = float(np.sqrt(np.mean((s * a - b) ** 2)))
    return s, rms


class ScaledPlaneTerm(CostTerm):
    """``n^T (R_Li (R_X s p + t_X) + t_Li - q)`` over frozen point/plane pairs."""

    row_fields = ("points", "frames", "normals", "centroids")

    def __init__(self, points, frames, lidar_poses, normals, centroids, name="scaled_point_to_plane", loss=None, weight=1.0, reference_scale=None):
        super().__init__(name, loss, weight)
        self.reference_scale = reference_scale
        self.points = np.asarray(points, dtype=float)
        self.frames = np.asarray(frames, dtype=np.int64)
        self.lidar = np.asarray(lidar_poses, dtype=float)  # (n_frames, 7), shared, not a row field
        self.normals = np.asarray(normals, dtype=float)
        self.centroids = np.asarray(centroids, dtype=float)

    @property
    def slots(self):
        z = np.zeros(len(self.points), dtype=np.int64)
        return [("scale", z), ("extrinsics", z)]

    def evaluate(self, values, jacobians=True):
        s = values["scale"][0, 0]
        X = values["extrinsics"][0]
        RX = quat_to_matrix(X[:4])
        L = self.lidar[self.frames]
        RL = quat_to_matrix(L[:, :4])
        a = s * self.points @ RX.T
        y = np.einsum("nij,nj->ni", RL, a + X[4:]) + L[:, 4:]
        d = np.einsum("ij,ij->i", self.normals, y - self.centroids)
        k = 1.0 if self.reference_scale is None else self.reference_scale / s
        if not jacobians:
            return k * d[:, None], None
        m = np.einsum("nji,nj->ni", RL, self.normals)  # R_Li^T n
        Js = np.einsum("ni,ni->n", m, a)[:, None, None]
        if self.reference_scale is not None:
            Js = Js - d[:, None, None]
        JX = np.empty((len(d), 1, 6))
        JX[:, 0, :3] = np.cross(a, m)
        JX[:, 0, 3:] = m
        return k * d[:, None], [k * Js, k * JX]


def _lidar_array(lidar_poses):
    return np.stack([p.as_array() for p in lidar_poses])


def scaled_pairs(points, lidar_indices, lidar_poses, scale, extrinsics: Se3, cfg: InitConfig):
    """Valid (point, frame, plane) pairs for the current scale and extrinsics."""
    pts, frames, normals, centroids = [], [], [], []
    lidar_world = extrinsics.transform(scale * points)
    for i, (index, L) in enumerate(zip(lidar_indices, lidar_poses)):
        q = query_patches(index, L.transform(lidar_world), cfg.cloud)
        ok = q.planar & (q.distances <= cfg.max_distance)
        pts.append(np.flatnonzero(ok))
        frames.append(np.full(int(ok.sum()), i))
        normals.append(q.normals[ok])
        centroids.append(q.centroids[ok])
    idx = np.concatenate(pts)
    return idx, np.concatenate(frames), np.concatenate(normals), np.concatenate(centroids)


def camera_frame_normals(normals, frames, lidar_poses, extrinsics: Se3):
    """Rotate LiDAR-frame normals into the first camera frame."""
    RL = np.stack([p.R for p in lidar_poses])[frames]
    n_world = np.einsum("nji,nj->ni", RL, normals)
    return n_world @ extrinsics.R


def refine_scale_extrinsics(points, camera_poses, lidar_indices, lidar_poses, init: ScaledInit, cfg: Optional[InitConfig] = None, covariances=None) -> ScaledInit:
    """Alternate pair building and robust point-to-plane refinement of scale and extrinsics.

    ``points`` are unscaled first-camera-frame positions. The result carries
    camera poses, points and covariances rescaled by the final scale.
    """
    cfg = cfg or InitConfig()
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise NoValidPairs("no visual points to register")
    scale, X = float(init.scale), init.extrinsics
    lidar_arr = _lidar_array(lidar_poses)
    loss = RobustLoss.huber(cfg.huber_delta)
    history = []
    converged = False
    normals_cam = None
    for k in range(cfg.max_rounds):
        idx, frames, normals, centroids = scaled_pairs(points, lidar_indices, lidar_poses, scale, X, cfg)
        if len(idx) == 0:
            raise NoValidPairs(f"round {k}: no point lies within {cfg.max_distance} m of a valid plane")
        normals_cam = camera_frame_normals(normals, frames, lidar_poses, X)
        problem = Problem()
        problem.add_family(Family("scale", [[scale]], kind="positive"))
        problem.add_family(Family("extrinsics", X.as_array()[None], kind="se3"))
        problem.add_term(ScaledPlaneTerm(points[idx], frames, lidar_arr, normals, centroids, loss=loss, reference_scale=scale if cfg.scale_normalized else None))
        vals, report = solve_lm(problem, cfg.solver, label=f"init_round_{k}")
        new_scale = float(vals["scale"][0, 0])
        new_X = Se3.from_array(vals["extrinsics"][0])
        history.append(InitRound(new_scale, new_X, report.final_cost, len(idx)))
        change = max(
            abs(np.log(new_scale / scale)),
            np.radians(rotation_angle_between(X.rotation, new_X.rotation)),
            float(np.linalg.norm(new_X.translation - X.translation)),
        )
        scale, X = new_scale, new_X
        log.debug("init round %d: scale %.6f, %d pairs, cost %.3e", k, scale, len(idx), report.final_cost)
        if change < cfg.tolerance:
            converged = True
            break
    poses = [Se3(C.rotation, scale * C.translation) for C in camera_poses]
    covs = None if covariances is None else np.asarray(covariances) * scale**2
    return ScaledInit(scale, X, history, converged, poses, scale * points, covs, normals_cam)
