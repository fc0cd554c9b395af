"""Triangulation, reprojection bundle adjustment and per-point covariance."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InsufficientParallax, NegativeDepth
from .geometry import CameraIntrinsics, Se3, project_jacobians, quat_to_matrix, skew, unproject
from .solver import CostTerm, Family, Problem, SolverConfig, SolverReport, _Layout, _LinearSystem, _linearize, solve_lm

log = logging.getLogger(__name__)

MIN_PARALLAX_DEG = 0.5


@dataclass
class FeatureTrack:
    """Observations of one 3D point: frame indices, pixels and 2x2 pixel covariances."""

    point_id: int
    frames: np.ndarray
    pixels: np.ndarray
    covariances: Optional[np.ndarray] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        n = len(self.frames)
        if n < 2:
            raise ValueError(f"track {self.point_id}: needs at least 2 observations, has {n}")
        if len(np.unique(self.frames)) != n:
            raise ValueError(f"track {self.point_id}: frame indices must be distinct")
        if len(self.pixels) != n:
            raise ValueError(f"track {self.point_id}: {len(self.pixels)} pixels for {n} frames")
        if self.covariances is None:
            self.covariances = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
        else:
            self.covariances = np.asarray(self.covariances, dtype=float).reshape(n, 2, 2)
            if not np.allclose(self.covariances, np.swapaxes(self.covariances, 1, 2)):
                raise ValueError(f"track {self.point_id}: pixel covariance not symmetric")
            if np.any(np.linalg.eigvalsh(self.covariances) <= 0):
                raise ValueError(f"track {self.point_id}: pixel covariance not positive definite")

    def __len__(self):
        return len(self.frames)

    @classmethod
    def isotropic(cls, point_id, frames, pixels, sigma=1.0):
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), (len(frames),))
        cov = sig[:, None, None] ** 2 * np.eye(2)
        return cls(point_id, frames, pixels, cov)


@dataclass
class VisualPoint:
    point_id: int
    position: np.ndarray
    covariance: np.ndarray
    track: FeatureTrack


@dataclass
class VisualBAConfig:
    optimize_intrinsics: bool = True
    tie_focal: bool = False
    covariance: str = "block"  # "block" or "marginal"
    max_condition: float = 1e12
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=100))


@dataclass
class VisualBAResult:
    poses: list
    points: list
    intrinsics: CameraIntrinsics
    report: SolverReport
    dropped: list = field(default_factory=list)


def whitening(covariances):
    """Matrices ``W`` with ``W^T W = inv(Sigma)`` for a stack of SPD 2x2 covariances."""
    L = np.linalg.cholesky(covariances)
    return np.linalg.inv(L)


class ReprojectionTerm(CostTerm):
    """Whitened ``pi(R_i p_j + t_i, D) - x_ij`` for a set of observations."""

    row_fields = ("frames", "points", "pixels", "whiten")
    residual_size = 2

    def __init__(self, frames, points, pixels, whiten, name="reprojection", loss=None, weight=1.0):
        super().__init__(name, loss, weight)
        self.frames = np.asarray(frames, dtype=np.int64)
        self.points = np.asarray(points, dtype=np.int64)
        self.pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        self.whiten = np.asarray(whiten, dtype=float).reshape(-1, 2, 2)

    @property
    def slots(self):
        return [("poses", self.frames), ("points", self.points), ("intrinsics", np.zeros_like(self.frames))]

    def evaluate(self, values, jacobians=True):
        pose = values["poses"][self.frames]
        R = quat_to_matrix(pose[:, :4])
        p = values["points"][self.points]
        Rp = np.einsum("nij,nj->ni", R, p)
        pc = Rp + pose[:, 4:]
        uv, Jp, Jd, _ = project_jacobians(pc, values["intrinsics"][0])
        r = np.einsum("nij,nj->ni", self.whiten, uv - self.pixels)
        if not jacobians:
            return r, None
        WJp = self.whiten @ Jp
        n = len(p)
        Jpose = np.empty((n, 2, 6))
        Jpose[:, :, :3] = -WJp @ skew(Rp)
        Jpose[:, :, 3:] = WJp
        Jpoint = WJp @ R
        Jintr = self.whiten @ Jd
        return r, [Jpose, Jpoint, Jintr]


def tracks_to_arrays(tracks, point_index=None):
    """Flatten tracks into observation arrays ``(frames, point_idx, pixels, covariances)``."""
    frames, pidx, pix, cov = [], [], [], []
    for j, tr in enumerate(tracks):
        k = j if point_index is None else point_index[j]
        frames.append(tr.frames)
        pidx.append(np.full(len(tr), k, dtype=np.int64))
        pix.append(tr.pixels)
        cov.append(tr.covariances)
    if not frames:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros((0, 2, 2))
    return np.concatenate(frames), np.concatenate(pidx), np.concatenate(pix), np.concatenate(cov)


def triangulate(track: FeatureTrack, poses, D: CameraIntrinsics):
    """Linear triangulation from bearing rays; returns a point in the world frame."""
    f = unproject(track.pixels, D)
    Rs = np.stack([poses[i].R for i in track.frames])
    ts = np.stack([poses[i].translation for i in track.frames])
    rays = np.einsum("nji,nj->ni", Rs, f)  # world-frame directions
    cosines = np.clip(rays @ rays.T, -1.0, 1.0)
    if np.degrees(np.arccos(np.min(cosines))) <= MIN_PARALLAX_DEG:
        raise InsufficientParallax(f"track {track.point_id}: parallax below {MIN_PARALLAX_DEG} deg")
    # f x (R p + t) = 0  ->  [f]x R p = -[f]x t
    S = skew(f)
    A = (S @ Rs).reshape(-1, 3)
    b = -np.einsum("nij,nj->ni", S, ts).reshape(-1)
    p, *_ = np.linalg.lstsq(A, b, rcond=None)
    depth = np.einsum("nij,j->ni", Rs, p)[:, 2] + ts[:, 2]
    if np.any(depth <= 0):
        raise NegativeDepth(f"track {track.point_id}: triangulated point behind frame {int(track.frames[np.argmin(depth)])}")
    return p


def intrinsics_family(D: CameraIntrinsics, optimize=True, tie_focal=False) -> Family:
    basis = None
    if tie_focal:
        basis = np.zeros((6, 5))
        basis[0, 0] = basis[1, 0] = 1.0
        basis[2:, 1:] = np.eye(4)
    return Family("intrinsics", D.as_array()[None], constant=[not optimize], basis=basis)


def _scale_gauge(poses_arr):
    """Hold the dominant translation coordinate of the second pose to remove the scale freedom."""
    if len(poses_arr) < 2:
        return {}
    t1 = poses_arr[1, 4:]
    return {1: [3 + int(np.argmax(np.abs(t1)))]}


def point_covariances(problem: Problem, term: ReprojectionTerm, n_points: int, mode="block", max_condition=1e12):
    """Per-point 3x3 covariances at the current solution.

    ``block`` inverts each point's Gauss-Newton Hessian block with poses and
    intrinsics fixed; ``marginal`` also accounts for the free pose and
    intrinsic parameters through the Schur complement. Returns
    ``(covariances, ok_mask)``.
    """
    _, jacs = term.evaluate(problem.values(), jacobians=True)
    Jp = jacs[1]
    Hblk = np.zeros((n_points, 3, 3))
    np.add.at(Hblk, term.points, np.einsum("nki,nkj->nij", Jp, Jp))
    eig = np.linalg.eigvalsh(Hblk)
    ok = (eig[:, 0] > 0) & (eig[:, -1] < max_condition * np.maximum(eig[:, 0], 1e-300))
    cov = np.full((n_points, 3, 3), np.nan)
    cov[ok] = np.linalg.inv(Hblk[ok])
    if mode == "marginal" and np.any(ok):
        layout = _Layout(problem)
        _, r, J = _linearize(problem, layout, problem.values())
        system = _LinearSystem(J, r, layout, schur_min_blocks=-1)
        nc = layout.n_free
        if system.use_schur and nc:
            b, m = layout.block, layout.n_blocks
            Cinv = np.linalg.inv(system.C)
            B3 = system.B.reshape(nc, m, b)
            S = system.A - np.einsum("cmi,mij,dmj->cd", B3, Cinv, B3)
            Sinv = np.linalg.pinv(S)
            # member index -> block index in the elimination layout
            cols = layout.cols["points"]
            for j in np.flatnonzero(ok):
                if cols[j, 0] < 0:
                    continue
                k = (cols[j, 0] - nc) // b
                G = Cinv[k] @ B3[:, k, :].T
                cov[j] = Cinv[k] + G @ Sinv @ G.T
    return cov, ok


def bundle_adjust_visual(tracks, poses, D: CameraIntrinsics, cfg: Optional[VisualBAConfig] = None, points=None):
    """Reprojection-only bundle adjustment.

    ``poses`` map the first-camera frame into each camera; pose 0 is held at
    identity. Points default to triangulations of the tracks. Returns a
    :class:`VisualBAResult`; tracks that fail triangulation or whose Hessian
    block is rank deficient are listed in ``dropped``.
    """
    cfg = cfg or VisualBAConfig()
    dropped = []
    kept, pts = [], []
    for j, tr in enumerate(tracks):
        if points is not None:
            kept.append(tr)
            pts.append(np.asarray(points[j], dtype=float))
            continue
        try:
            pts.append(triangulate(tr, poses, D))
            kept.append(tr)
        except (InsufficientParallax, NegativeDepth) as exc:
            dropped.append((tr.point_id, str(exc)))
    pose_arr = np.stack([p.as_array() for p in poses])
    problem = Problem()
    const = np.zeros(len(poses), dtype=bool)
    const[0] = True
    problem.add_family(Family("poses", pose_arr, kind="se3", constant=const, fixed_dofs=_scale_gauge(pose_arr)))
    problem.add_family(Family("points", np.array(pts).reshape(-1, 3), eliminate=True))
    problem.add_family(intrinsics_family(D, cfg.optimize_intrinsics, cfg.tie_focal))
    fr, pidx, pix, cov = tracks_to_arrays(kept)
    term = ReprojectionTerm(fr, pidx, pix, whitening(cov))
    problem.add_term(term)
    _, report = solve_lm(problem, cfg.solver, label="visual_ba")

    vals = problem.values()
    covs, ok = point_covariances(problem, term, len(kept), cfg.covariance, cfg.max_condition)
    out_points = []
    for j, tr in enumerate(kept):
        if not ok[j]:
            dropped.append((tr.point_id, "rank-deficient point Hessian"))
            continue
        out_points.append(VisualPoint(tr.point_id, vals["points"][j].copy(), covs[j], tr))
    D_out = CameraIntrinsics.from_array(vals["intrinsics"][0], D.width, D.height)
    poses_out = [Se3.from_array(row) for row in vals["poses"]]
    poses_out[0] = Se3.identity()
    if dropped:
        log.info("visual BA dropped %d tracks", len(dropped))
    return VisualBAResult(poses_out, out_points, D_out, report, dropped)
