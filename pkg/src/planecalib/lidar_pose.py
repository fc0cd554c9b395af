"""LiDAR odometry: scan-to-scan point-to-plane ICP and multi-scan refinement."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cloud import CloudConfig, PointCloud, SpatialIndex, build_index, query_patches
from .errors import InsufficientOverlap
from .geometry import Se3, compose, inverse, quat_to_matrix, rotation_angle_between, skew
from .solver import CostTerm, Family, Problem, RobustLoss, SolverConfig, solve_lm

log = logging.getLogger(__name__)


@dataclass
class LidarTrajectory:
    """Poses mapping the first scan's frame into each scan's frame."""

    poses: list
    converged: bool = True

    def __post_init__(self):
        if self.poses and not self.poses[0].is_identity():
            raise ValueError("first LiDAR pose must be the identity")

    def __len__(self):
        return len(self.poses)


@dataclass
class IcpConfig:
    max_iterations: int = 50
    huber_delta: float = 0.1
    rotation_tol: float = 1e-6  # rad
    translation_tol: float = 1e-5  # m
    min_overlap: float = 0.3
    max_distance: float = 1.0
    sample_size: int = 2000
    inner_iterations: int = 5
    seed: int = 0
    cloud: CloudConfig = field(default_factory=CloudConfig)


@dataclass
class IcpResult:
    pose: Se3
    rms: float
    iterations: int
    converged: bool
    overlap: float


@dataclass
class RefineConfig:
    max_iterations: int = 10
    huber_delta: float = 0.1
    max_distance: float = 0.5
    sample_size: int = 1000
    window: int = 2  # pair each scan with scans up to this many indices away
    inner_iterations: int = 5
    tolerance: float = 1e-10
    seed: int = 0
    cloud: CloudConfig = field(default_factory=CloudConfig)


class PointToPlaneTerm(CostTerm):
    """``n^T (R p + t - q)`` for source points against fixed target planes."""

    row_fields = ("points", "normals", "centroids")

    def __init__(self, points, normals, centroids, family="pose", name="point_to_plane", loss=None, weight=1.0):
        super().__init__(name, loss, weight)
        self.family = family
        self.points = np.asarray(points, dtype=float)
        self.normals = np.asarray(normals, dtype=float)
        self.centroids = np.asarray(centroids, dtype=float)

    @property
    def slots(self):
        return [(self.family, np.zeros(len(self.points), dtype=np.int64))]

    def evaluate(self, values, jacobians=True):
        x = values[self.family][0]
        R = quat_to_matrix(x[:4])
        Rp = self.points @ R.T
        d = np.einsum("ij,ij->i", self.normals, Rp + x[4:] - self.centroids)
        if not jacobians:
            return d[:, None], None
        J = np.empty((len(d), 1, 6))
        J[:, 0, :3] = np.cross(Rp, self.normals)
        J[:, 0, 3:] = self.normals
        return d[:, None], [J]


class ScanPairTerm(CostTerm):
    """``n_k^T (T_k T_i^{-1} p - q_k)``: a point of scan ``i`` against a plane of scan ``k``."""

    row_fields = ("source", "target", "points", "normals", "centroids")

    def __init__(self, source, target, points, normals, centroids, name="scan_pairs", loss=None, weight=1.0):
        super().__init__(name, loss, weight)
        self.source = np.asarray(source, dtype=np.int64)
        self.target = np.asarray(target, dtype=np.int64)
        self.points = np.asarray(points, dtype=float)
        self.normals = np.asarray(normals, dtype=float)
        self.centroids = np.asarray(centroids, dtype=float)

    @property
    def slots(self):
        return [("poses", self.source), ("poses", self.target)]

    def evaluate(self, values, jacobians=True):
        P = values["poses"]
        Ri = quat_to_matrix(P[self.source, :4])
        Rk = quat_to_matrix(P[self.target, :4])
        v = self.points - P[self.source, 4:]
        w = np.einsum("nji,nj->ni", Ri, v)
        Rkw = np.einsum("nij,nj->ni", Rk, w)
        y = Rkw + P[self.target, 4:]
        d = np.einsum("ij,ij->i", self.normals, y - self.centroids)
        if not jacobians:
            return d[:, None], None
        nw = np.einsum("nji,nj->ni", Rk, self.normals)  # (dy/dw)^T n
        Ji = np.empty((len(d), 1, 6))
        # dw/domega_i = R_i^T [v]x, dw/dt_i = -R_i^T
        Ri_nw = np.einsum("nij,nj->ni", Ri, nw)
        Ji[:, 0, :3] = np.einsum("ni,nij->nj", Ri_nw, skew(v))
        Ji[:, 0, 3:] = -Ri_nw
        Jk = np.empty((len(d), 1, 6))
        Jk[:, 0, :3] = np.cross(Rkw, self.normals)
        Jk[:, 0, 3:] = self.normals
        return d[:, None], [Ji, Jk]


def _sample(n, size, rng):
    if n <= size:
        return np.arange(n)
    return np.sort(rng.choice(n, size=size, replace=False))


def _pose_change(a: Se3, b: Se3):
    return np.radians(rotation_angle_between(a.rotation, b.rotation)), float(np.linalg.norm(a.translation - b.translation))


def icp_point_to_plane(source: PointCloud, target_index: SpatialIndex, initial: Optional[Se3] = None, cfg: Optional[IcpConfig] = None) -> IcpResult:
    """Align ``source`` to the indexed target; the returned pose maps source into target coordinates."""
    cfg = cfg or IcpConfig()
    pose = initial or Se3.identity()
    rng = np.random.default_rng(cfg.seed)
    pts = source.points[_sample(len(source), cfg.sample_size, rng)]
    loss = RobustLoss.huber(cfg.huber_delta)
    solver_cfg = SolverConfig(max_iterations=cfg.inner_iterations)
    converged = False
    iterations = 0
    overlap = 0.0
    for it in range(cfg.max_iterations):
        iterations = it + 1
        q = query_patches(target_index, pose.transform(pts), cfg.cloud)
        ok = q.planar & (q.distances <= cfg.max_distance)
        overlap = float(np.mean(ok)) if len(ok) else 0.0
        if it == 0 and overlap < cfg.min_overlap:
            raise InsufficientOverlap(f"only {100 * overlap:.1f}% of source points found valid planes (need {100 * cfg.min_overlap:.0f}%)")
        if not np.any(ok):
            break
        problem = Problem()
        problem.add_family(Family("pose", pose.as_array()[None], kind="se3"))
        problem.add_term(PointToPlaneTerm(pts[ok], q.normals[ok], q.centroids[ok], loss=loss))
        vals, _ = solve_lm(problem, solver_cfg, label="icp")
        new = Se3.from_array(vals["pose"][0])
        drot, dtrans = _pose_change(pose, new)
        pose = new
        if drot < cfg.rotation_tol and dtrans < cfg.translation_tol:
            converged = True
            break
    q = query_patches(target_index, pose.transform(pts), cfg.cloud)
    ok = q.planar & (q.distances <= cfg.huber_delta)
    rms = float(np.sqrt(np.mean(q.distances[ok] ** 2))) if np.any(ok) else float("nan")
    if not converged:
        log.warning("ICP stopped after %d iterations without converging", iterations)
    return IcpResult(pose, rms, iterations, converged, overlap)


def estimate_trajectory(scans, relative_guesses=None, cfg: Optional[IcpConfig] = None, workers: int = 1) -> LidarTrajectory:
    """Chain scan-to-scan ICP.

    ``relative_guesses[i]`` (for ``i >= 1``) is an initial guess of the
    transform taking scan ``i`` coordinates into scan ``i - 1`` coordinates.
    """
    cfg = cfg or IcpConfig()
    poses = [Se3.identity()]
    converged = True
    prev_index = build_index(scans[0], workers)
    for i in range(1, len(scans)):
        guess = relative_guesses[i] if relative_guesses is not None else Se3.identity()
        res = icp_point_to_plane(scans[i], prev_index, guess, cfg)
        converged &= res.converged
        # T_{i-1,i} = T_{L,i-1} T_{L,i}^{-1}  =>  T_{L,i} = T_{i-1,i}^{-1} T_{L,i-1}
        poses.append(compose(inverse(res.pose), poses[-1]))
        prev_index = build_index(scans[i], workers)
    return LidarTrajectory(poses, converged)


def _scan_pairs(scans, indices, samples, P, cfg: RefineConfig):
    src, tgt, pts, nrm, cen = [], [], [], [], []
    poses = [Se3.from_array(row) for row in P]
    for i in range(len(scans)):
        for k in range(len(scans)):
            if i == k or abs(i - k) > cfg.window:
                continue
            p = samples[i]
            rel = compose(poses[k], inverse(poses[i]))
            q = query_patches(indices[k], rel.transform(p), cfg.cloud)
            ok = q.planar & (q.distances <= cfg.max_distance)
            m = int(ok.sum())
            src.append(np.full(m, i))
            tgt.append(np.full(m, k))
            pts.append(p[ok])
            nrm.append(q.normals[ok])
            cen.append(q.centroids[ok])
    loss = RobustLoss.huber(cfg.huber_delta)
    return ScanPairTerm(np.concatenate(src), np.concatenate(tgt), np.concatenate(pts), np.concatenate(nrm), np.concatenate(cen), loss=loss)


def trajectory_cost(scans, trajectory: LidarTrajectory, cfg: Optional[RefineConfig] = None, indices=None) -> float:
    """Robust multi-scan point-to-plane cost with freshly built correspondences."""
    cfg = cfg or RefineConfig()
    indices = indices or [build_index(s) for s in scans]
    samples = _samples(scans, cfg)
    P = np.stack([p.as_array() for p in trajectory.poses])
    problem = Problem()
    problem.add_family(Family("poses", P, kind="se3"))
    problem.add_term(_scan_pairs(scans, indices, samples, P, cfg))
    return problem.cost()


def _samples(scans, cfg):
    rng = np.random.default_rng(cfg.seed)
    return [s.points[_sample(len(s), cfg.sample_size, rng)] for s in scans]


def refine_trajectory(scans, initial: LidarTrajectory, cfg: Optional[RefineConfig] = None, workers: int = 1) -> LidarTrajectory:
    """Jointly refine all scan poses against each other's local planes (pose 0 held fixed).

    Each round rebuilds correspondences and is kept only if it lowers the
    rebuilt cost, so the reported cost never increases.
    """
    cfg = cfg or RefineConfig()
    if len(scans) < 2:
        return LidarTrajectory(list(initial.poses), True)
    indices = [build_index(s, workers) for s in scans]
    samples = _samples(scans, cfg)
    P = np.stack([p.as_array() for p in initial.poses])
    const = np.zeros(len(P), dtype=bool)
    const[0] = True

    def cost_at(P):
        problem = Problem()
        problem.add_family(Family("poses", P, kind="se3", constant=const))
        problem.add_term(_scan_pairs(scans, indices, samples, P, cfg))
        return problem

    problem = cost_at(P)
    cost = problem.cost()
    converged = False
    for _ in range(cfg.max_iterations):
        _, report = solve_lm(problem, SolverConfig(max_iterations=cfg.inner_iterations), label="lidar_refine")
        trial = problem.families["poses"].values.copy()
        trial_problem = cost_at(trial)
        trial_cost = trial_problem.cost()
        if not trial_cost < cost:
            converged = True
            break
        rel = (cost - trial_cost) / max(cost, 1e-300)
        P, cost, problem = trial, trial_cost, trial_problem
        if rel < cfg.tolerance:
            converged = True
            break
    poses = [Se3.from_array(row) for row in P]
    poses[0] = Se3.identity()
    return LidarTrajectory(poses, converged)
