"""Plane-constrained bundle adjustment of intrinsics, extrinsics, camera poses and points."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cloud import CloudConfig, PlanePatch, query_patches
from .errors import DegenerateProblem, NoValidPairs, NonPositiveDepth, ZeroVariance
from .geometry import CameraIntrinsics, Se3, project, quat_to_matrix, skew
from .solver import CostTerm, Family, Problem, SolverConfig, SolverReport, solve_lm
from .visual_ba import ReprojectionTerm, intrinsics_family, tracks_to_arrays, whitening

log = logging.getLogger(__name__)

MIN_VARIANCE = 1e-15


@dataclass
class JointConfig:
    alpha: float = 1.0
    auto_alpha: bool = False
    distance_threshold: float = 0.1
    rebuild_every: int = 3  # 0 freezes the correspondences
    max_final_rebuilds: int = 3
    max_iterations: int = 100
    function_tolerance: float = 1e-10
    gradient_tolerance: float = 1e-10
    degeneracy_ratio: float = 1e-3
    check_degeneracy: bool = True
    optimize_intrinsics: bool = True
    tie_focal: bool = False
    cloud: CloudConfig = field(default_factory=CloudConfig)

    def solver_config(self, max_iterations, max_accepted=None) -> SolverConfig:
        return SolverConfig(
            max_iterations=max_iterations,
            max_accepted=max_accepted,
            function_tolerance=self.function_tolerance,
            gradient_tolerance=self.gradient_tolerance,
        )


@dataclass(frozen=True)
class PointPlanePair:
    point_id: int
    lidar_frame_index: int
    patch: PlanePatch


@dataclass
class PairSet:
    """Vectorised point/plane pairs; ``point`` indexes the problem's point arrays."""

    point: np.ndarray
    frame: np.ndarray
    normal: np.ndarray
    centroid: np.ndarray

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 3)))

    def __len__(self):
        return len(self.point)

    def keys(self):
        return set(zip(self.point.tolist(), self.frame.tolist()))

    def select(self, mask):
        return PairSet(self.point[mask], self.frame[mask], self.normal[mask], self.centroid[mask])


@dataclass
class FilterReport:
    candidates: int = 0
    valid: int = 0
    no_neighborhood: int = 0
    ratio_rejected: int = 0
    distance_rejected: int = 0
    zero_variance: int = 0
    discarded_points: list = field(default_factory=list)

    def to_dict(self):
        return {
            "candidates": self.candidates,
            "valid": self.valid,
            "no_neighborhood": self.no_neighborhood,
            "ratio_rejected": self.ratio_rejected,
            "distance_rejected": self.distance_rejected,
            "zero_variance": self.zero_variance,
            "discarded_points": list(self.discarded_points),
        }


@dataclass
class Degeneracy:
    degenerate: bool
    ratio: float
    weak_direction: np.ndarray
    eigenvalues: np.ndarray

    @property
    def status(self):
        return "degenerate" if self.degenerate else "well_constrained"

    def to_dict(self):
        return {
            "status": self.status,
            "ratio": float(self.ratio),
            "weak_direction": [float(v) for v in self.weak_direction],
            "eigenvalues": [float(v) for v in self.eigenvalues],
        }


@dataclass
class CalibrationProblem:
    """Full joint state. ``points`` are first-camera-frame positions (metric)."""

    intrinsics: CameraIntrinsics
    extrinsics: Se3
    camera_poses: list
    points: np.ndarray
    covariances: np.ndarray
    tracks: list
    lidar_poses: list
    alpha: float = 1.0
    pairs: Optional[PairSet] = None
    active: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(-1, 3, 3)
        if len(self.points) != len(self.tracks) or len(self.covariances) != len(self.tracks):
            raise ValueError("points, covariances and tracks must have equal length")
        if self.active is None:
            self.active = np.ones(len(self.points), dtype=bool)
        if len(self.camera_poses) != len(self.lidar_poses):
            raise ValueError("camera and LiDAR pose counts differ")

    @property
    def point_ids(self):
        return [t.point_id for t in self.tracks]

    def observations(self):
        """Observation arrays over active points: ``(frames, point_index, pixels, covariances)``."""
        keep = np.flatnonzero(self.active)
        return tracks_to_arrays([self.tracks[j] for j in keep], keep)

    def pair_list(self):
        if self.pairs is None:
            return []
        out = []
        for j, i, n, q in zip(self.pairs.point, self.pairs.frame, self.pairs.normal, self.pairs.centroid):
            out.append(PointPlanePair(self.tracks[j].point_id, int(i), PlanePatch(n, q, np.full(3, np.nan), 0)))
        return out


def lidar_frame_points(problem: CalibrationProblem, frame: int, points=None):
    """Points carried into LiDAR frame ``frame`` along ``X . T_Ci``."""
    pts = problem.points if points is None else points
    return problem.extrinsics.transform(problem.camera_poses[frame].transform(pts))


def pair_variance(normal, covariance, pose: Se3, extrinsics: Se3):
    m = pose.R.T @ (extrinsics.R.T @ normal)
    return float(m @ covariance @ m)


def point_to_plane_residual(problem: CalibrationProblem, point: int, frame: int, normal, centroid):
    """Signed distance of a point to a LiDAR plane and its propagated variance.

    Raises :class:`ZeroVariance` when the variance along the normal vanishes.
    The pair's cost contribution is ``0.5 * residual**2 / variance``.
    """
    y = lidar_frame_points(problem, frame, problem.points[point])
    d = float(np.asarray(normal) @ (y - np.asarray(centroid)))
    v = pair_variance(np.asarray(normal, dtype=float), problem.covariances[point], problem.camera_poses[frame], problem.extrinsics)
    if v < MIN_VARIANCE:
        raise ZeroVariance(f"variance {v:.3e} along the plane normal for point {point} in frame {frame}")
    return d, v


def reprojection_residual(problem: CalibrationProblem, point: int, frame: int):
    """``x - pi(R_i p + t_i, D)`` and the information matrix of the observation."""
    track = problem.tracks[point]
    hit = np.flatnonzero(track.frames == frame)
    if not len(hit):
        raise KeyError(f"point {point} is not observed in frame {frame}")
    k = int(hit[0])
    pc = problem.camera_poses[frame].transform(problem.points[point])
    if pc[2] <= 0:
        raise NonPositiveDepth(f"point {point} lies behind camera {frame}")
    r = track.pixels[k] - project(pc, problem.intrinsics)
    return r, np.linalg.inv(track.covariances[k])


class PointPlaneTerm(CostTerm):
    """Variance-normalised point-to-plane distance ``n^T (X T_i p - q) / sqrt(m^T S m)``."""

    row_fields = ("point", "frame", "normal", "centroid")

    def __init__(self, point, frame, normal, centroid, covariances, name="point_to_plane", loss=None, weight=1.0):
        super().__init__(name, loss, weight)
        self.point = np.asarray(point, dtype=np.int64)
        self.frame = np.asarray(frame, dtype=np.int64)
        self.normal = np.asarray(normal, dtype=float).reshape(-1, 3)
        self.centroid = np.asarray(centroid, dtype=float).reshape(-1, 3)
        self.covariances = np.asarray(covariances, dtype=float)  # indexed by point, shared

    @property
    def slots(self):
        return [("extrinsics", np.zeros_like(self.point)), ("poses", self.frame), ("points", self.point)]

    def evaluate(self, values, jacobians=True):
        X = values["extrinsics"][0]
        RX = quat_to_matrix(X[:4])
        P = values["poses"][self.frame]
        Ri = quat_to_matrix(P[:, :4])
        p = values["points"][self.point]
        n = self.normal
        S = self.covariances[self.point]
        b = np.einsum("nij,nj->ni", Ri, p)
        c = b + P[:, 4:]
        a = c @ RX.T
        d = np.einsum("ij,ij->i", n, a + X[4:] - self.centroid)
        u = n @ RX  # R_X^T n
        m = np.einsum("nji,nj->ni", Ri, u)  # R_i^T R_X^T n
        Sm = np.einsum("nij,nj->ni", S, m)
        v = np.einsum("ni,ni->n", m, Sm)
        sv = np.sqrt(v)
        r = (d / sv)[:, None]
        if not jacobians:
            return r, None
        k = len(d)
        ddX = np.concatenate([np.cross(a, n), n], axis=1)
        ddP = np.concatenate([np.cross(b, u), u], axis=1)
        ddp = m
        # variance derivatives
        SmRi = np.einsum("ni,nij->nj", Sm, np.swapaxes(Ri, 1, 2))  # (S m)^T R_i^T
        dvX = np.zeros((k, 6))
        dvX[:, :3] = 2.0 * np.einsum("nj,njk->nk", SmRi @ RX.T, skew(n))
        dvP = np.zeros((k, 6))
        dvP[:, :3] = 2.0 * np.einsum("nj,njk->nk", SmRi, skew(u))
        f1 = (1.0 / sv)[:, None]
        f2 = (0.5 * d / (v * sv))[:, None]
        JX = (f1 * ddX - f2 * dvX)[:, None, :]
        JP = (f1 * ddP - f2 * dvP)[:, None, :]
        Jp = (f1 * ddp)[:, None, :]
        return r, [JX, JP, Jp]


def build_correspondences(problem: CalibrationProblem, lidar_indices, cfg: Optional[JointConfig] = None, discard=True):
    """Pair every active point with local planes in every LiDAR frame.

    Returns ``(pairs, report)``. With ``discard`` set, points left without any
    valid pair are deactivated.
    """
    cfg = cfg or JointConfig()
    report = FilterReport()
    active = np.flatnonzero(problem.active)
    if len(active) == 0:
        raise NoValidPairs("no points to pair with LiDAR planes")
    chunks = []
    for i, index in enumerate(lidar_indices):
        y = lidar_frame_points(problem, i, problem.points[active])
        q = query_patches(index, y, cfg.cloud)
        report.candidates += len(active)
        report.no_neighborhood += int(np.sum(~q.found))
        report.ratio_rejected += int(np.sum(q.found & ~q.planar))
        far = q.planar & ~(q.distances <= cfg.distance_threshold)
        report.distance_rejected += int(np.sum(far))
        ok = q.planar & (q.distances <= cfg.distance_threshold)
        if not np.any(ok):
            continue
        R = (problem.extrinsics.R @ problem.camera_poses[i].R).T
        m = q.normals[ok] @ R.T
        v = np.einsum("ni,nij,nj->n", m, problem.covariances[active[ok]], m)
        good = v >= MIN_VARIANCE
        report.zero_variance += int(np.sum(~good))
        sel = np.flatnonzero(ok)[good]
        chunks.append(PairSet(active[sel], np.full(len(sel), i, np.int64), q.normals[sel], q.centroids[sel]))
    pairs = PairSet(
        np.concatenate([c.point for c in chunks]) if chunks else np.zeros(0, np.int64),
        np.concatenate([c.frame for c in chunks]) if chunks else np.zeros(0, np.int64),
        np.concatenate([c.normal for c in chunks]) if chunks else np.zeros((0, 3)),
        np.concatenate([c.centroid for c in chunks]) if chunks else np.zeros((0, 3)),
    )
    report.valid = len(pairs)
    if len(pairs) == 0:
        raise NoValidPairs("no point lies within the distance threshold of a valid LiDAR plane")
    paired = np.zeros(len(problem.points), dtype=bool)
    paired[pairs.point] = True
    lost = np.flatnonzero(problem.active & ~paired)
    report.discarded_points = [problem.tracks[j].point_id for j in lost]
    if discard:
        problem.active = problem.active & paired
    return pairs, report


def camera_frame_normals(problem: CalibrationProblem, pairs: PairSet):
    R = np.stack([(problem.extrinsics.R @ T.R) for T in problem.camera_poses])[pairs.frame]
    return np.einsum("nji,nj->ni", R, pairs.normal)


def diagnose_normals(normals, ratio_threshold=1e-3) -> Degeneracy:
    n = np.asarray(normals, dtype=float).reshape(-1, 3)
    if len(n) == 0:
        raise NoValidPairs("cannot diagnose an empty pair set")
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    M = n.T @ n
    w, V = np.linalg.eigh(M)
    ratio = w[0] / w[-1] if w[-1] > 0 else 0.0
    weak = V[:, 0]
    k = int(np.argmax(np.abs(weak)))
    if weak[k] < 0:
        weak = -weak
    return Degeneracy(bool(ratio < ratio_threshold), float(ratio), weak, w[::-1].copy())


def diagnose_degeneracy(pairs: PairSet, problem: CalibrationProblem, ratio_threshold=1e-3) -> Degeneracy:
    """Eigen-analysis of the summed outer products of first-camera-frame plane normals."""
    return diagnose_normals(camera_frame_normals(problem, pairs), ratio_threshold)


def _joint_problem(problem: CalibrationProblem, cfg: JointConfig) -> Problem:
    P = Problem()
    P.add_family(intrinsics_family(problem.intrinsics, cfg.optimize_intrinsics, cfg.tie_focal))
    P.add_family(Family("extrinsics", problem.extrinsics.as_array()[None], kind="se3"))
    poses = np.stack([T.as_array() for T in problem.camera_poses])
    const = np.zeros(len(poses), dtype=bool)
    const[0] = True
    P.add_family(Family("poses", poses, kind="se3", constant=const))
    P.add_family(Family("points", problem.points, constant=~problem.active, eliminate=True))
    fr, pidx, pix, cov = problem.observations()
    P.add_term(ReprojectionTerm(fr, pidx, pix, whitening(cov)))
    pairs = problem.pairs
    P.add_term(PointPlaneTerm(pairs.point, pairs.frame, pairs.normal, pairs.centroid, problem.covariances, weight=problem.alpha))
    return P


def _write_back(problem: CalibrationProblem, P: Problem):
    vals = P.values()
    D = problem.intrinsics
    problem.intrinsics = CameraIntrinsics.from_array(vals["intrinsics"][0], D.width, D.height)
    problem.extrinsics = Se3.from_array(vals["extrinsics"][0])
    poses = [Se3.from_array(row) for row in vals["poses"]]
    poses[0] = Se3.identity()
    problem.camera_poses = poses
    problem.points = vals["points"].copy()


@dataclass
class JointReport:
    segments: list
    iterations: int
    converged: bool
    termination_reason: str
    initial_cost: float
    final_cost: float
    reprojection_cost: float
    plane_cost: float
    alpha: float
    n_observations: int
    n_pairs: int
    n_points: int
    filters: list
    degeneracy: Optional[Degeneracy] = None

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "termination_reason": self.termination_reason,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "reprojection_cost": self.reprojection_cost,
            "plane_cost": self.plane_cost,
            "alpha": self.alpha,
            "n_observations": self.n_observations,
            "n_pairs": self.n_pairs,
            "n_points": self.n_points,
            "filters": [f.to_dict() for f in self.filters],
            "degeneracy": None if self.degeneracy is None else self.degeneracy.to_dict(),
            "segments": [s.to_dict() for s in self.segments],
        }


@dataclass
class JointResult:
    intrinsics: CameraIntrinsics
    extrinsics: Se3
    camera_poses: list
    points: np.ndarray
    point_ids: list
    report: JointReport


def solve_joint(problem: CalibrationProblem, lidar_indices, cfg: Optional[JointConfig] = None) -> JointResult:
    """Minimise ``alpha * E_P + E_V`` by LM, rebuilding correspondences between segments.

    Raises :class:`DegenerateProblem` when the paired plane normals do not
    span three dimensions (if ``cfg.check_degeneracy``).
    """
    cfg = cfg or JointConfig()
    filters = []
    if problem.pairs is None:
        problem.pairs, rep = build_correspondences(problem, lidar_indices, cfg)
        filters.append(rep)
    diagnosis = diagnose_degeneracy(problem.pairs, problem, cfg.degeneracy_ratio)
    if cfg.check_degeneracy and diagnosis.degenerate:
        raise DegenerateProblem(
            f"plane normals leave a weak direction {np.round(diagnosis.weak_direction, 4).tolist()} "
            f"(eigenvalue ratio {diagnosis.ratio:.2e})",
            diagnosis.weak_direction,
            diagnosis.ratio,
        )
    if cfg.auto_alpha:
        problem.alpha = len(problem.observations()[0]) / max(len(problem.pairs), 1)
    elif cfg.alpha < 0:
        raise ValueError("alpha must be non-negative")
    else:
        problem.alpha = cfg.alpha

    segments = []
    total = 0
    converged = False
    reason = "max_iterations"
    initial_cost = None
    final_rebuilds = 0
    while True:
        P = _joint_problem(problem, cfg)
        if initial_cost is None:
            initial_cost = P.cost()
        budget = cfg.max_iterations - total
        if budget <= 0:
            break
        seg_cfg = cfg.solver_config(budget, cfg.rebuild_every if cfg.rebuild_every > 0 else None)
        _, rep = solve_lm(P, seg_cfg, label=f"joint_segment_{len(segments)}")
        segments.append(rep)
        total += rep.iterations
        _write_back(problem, P)
        reason = rep.termination_reason
        if cfg.rebuild_every <= 0:
            converged = rep.converged
            break
        old = problem.pairs.keys()
        problem.pairs, frep = build_correspondences(problem, lidar_indices, cfg)
        filters.append(frep)
        if reason == "max_accepted":
            continue
        if not rep.converged:
            break
        if problem.pairs.keys() == old or final_rebuilds >= cfg.max_final_rebuilds:
            converged = True
            break
        final_rebuilds += 1

    P = _joint_problem(problem, cfg)
    costs = P.term_costs()
    report = JointReport(
        segments=segments,
        iterations=total,
        converged=converged,
        termination_reason=reason,
        initial_cost=float(initial_cost),
        final_cost=float(P.cost()),
        reprojection_cost=float(costs.get("reprojection", 0.0)),
        plane_cost=float(costs.get("point_to_plane", 0.0) / problem.alpha) if problem.alpha > 0 else 0.0,
        alpha=problem.alpha,
        n_observations=int(len(problem.observations()[0])),
        n_pairs=len(problem.pairs),
        n_points=int(problem.active.sum()),
        filters=filters,
        degeneracy=diagnosis,
    )
    if not converged:
        log.warning("joint optimisation stopped without converging (%s)", reason)
    keep = np.flatnonzero(problem.active)
    return JointResult(
        problem.intrinsics,
        problem.extrinsics,
        list(problem.camera_poses),
        problem.points[keep].copy(),
        [problem.tracks[j].point_id for j in keep],
        report,
    )
