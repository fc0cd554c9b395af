"""End-to-end calibration: LiDAR odometry, visual BA, scale/extrinsic init, joint BA."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .cloud import build_index
from .config import PipelineConfig
from .errors import CalibrationError as CalibrationFailure
from .errors import DegenerateMotion, DegenerateProblem
from .geometry import Se3, compose, inverse
from .init import ScaledInit, recover_scale, refine_scale_extrinsics
from .joint import CalibrationProblem, solve_joint
from .lidar_pose import LidarTrajectory, estimate_trajectory, refine_trajectory
from .metrics import calibration_error
from .synth import SyntheticDataset
from .visual_ba import bundle_adjust_visual

log = logging.getLogger(__name__)

REPORT_VERSION = 1
STAGES = ("lidar", "visual", "init", "joint")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3
EXIT_DEGENERATE = 4
EXIT_IO = 5


def from_synthetic(ds: SyntheticDataset) -> io.CalibrationDataset:
    """View a synthetic dataset as pipeline input (SfM-scaled poses, perturbed initials, GT block)."""
    gt = io.GroundTruth(ds.gt_intrinsics, ds.gt_extrinsics, ds.gt_scale, ds.gt_lidar_poses)
    D = ds.initial_intrinsics
    return io.CalibrationDataset(
        clouds=ds.clouds,
        tracks=ds.tracks,
        camera_poses=ds.sfm_camera_poses,
        intrinsics=D,
        initial_extrinsics=ds.initial_extrinsics,
        initial_scale=ds.initial_scale,
        gt=gt,
        image_sizes=[(D.width, D.height)] * ds.n_frames,
        name=f"{ds.spec.name}-seed{ds.spec.seed}",
    )


def relative_lidar_guesses(camera_poses, extrinsics: Se3, scale=None):
    """Scan-to-previous-scan guesses carried over from the camera trajectory.

    Without a scale only the rotation is transferred; the SfM translation is
    in arbitrary units.
    """
    guesses = [None]
    for i in range(1, len(camera_poses)):
        rel = compose(camera_poses[i - 1], inverse(camera_poses[i]))
        rel = Se3(rel.rotation, rel.translation * scale) if scale is not None else Se3(rel.rotation)
        lidar_rel = compose(compose(extrinsics, rel), inverse(extrinsics))
        guesses.append(lidar_rel if scale is not None else Se3(lidar_rel.rotation))
    return guesses


def _f(x):
    return float(x)


def _se3(T: Se3):
    return io.se3_to_dict(T)


@dataclass
class RunReport:
    status: str
    dataset: str
    config: dict
    stages: dict = field(default_factory=dict)
    result: Optional[dict] = None
    evaluation: Optional[dict] = None
    degeneracy: Optional[dict] = None
    error: Optional[dict] = None
    format_version: int = REPORT_VERSION

    @property
    def exit_code(self):
        return {"converged": EXIT_OK, "degenerate": EXIT_DEGENERATE}.get(self.status, EXIT_NOT_CONVERGED)

    def to_dict(self):
        return {
            "format_version": self.format_version,
            "status": self.status,
            "dataset": self.dataset,
            "config": self.config,
            "stages": self.stages,
            "result": self.result,
            "evaluation": self.evaluation,
            "degeneracy": self.degeneracy,
            "error": self.error,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, d):
        return cls(
            status=d["status"],
            dataset=d["dataset"],
            config=d["config"],
            stages=d["stages"],
            result=d["result"],
            evaluation=d["evaluation"],
            degeneracy=d["degeneracy"],
            error=d["error"],
            format_version=d["format_version"],
        )

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class PipelineState:
    """Stage outputs; each field is filled as the pipeline advances."""

    lidar_poses: Optional[list] = None
    intrinsics: Optional[object] = None
    camera_poses: Optional[list] = None
    points: Optional[np.ndarray] = None
    covariances: Optional[np.ndarray] = None
    point_ids: Optional[list] = None
    init: Optional[ScaledInit] = None
    joint: Optional[object] = None


def _evaluate(cfg, dataset, intrinsics, extrinsics):
    if dataset.gt is None:
        return None
    err = calibration_error(extrinsics, intrinsics, dataset.gt.extrinsics, dataset.gt.intrinsics, cfg.metrics.stride)
    return err.to_dict()


# ---------------------------------------------------------------------------
# checkpoints


def _save_checkpoint(directory, stage, state: PipelineState, stage_reports):
    if directory is None:
        return
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"format_version": REPORT_VERSION, "stage": stage, "reports": stage_reports}
    if state.lidar_poses is not None:
        doc["lidar_poses"] = [T.as_array().tolist() for T in state.lidar_poses]
    if state.intrinsics is not None:
        doc["intrinsics"] = io.intrinsics_to_dict(state.intrinsics)
        doc["camera_poses"] = [T.as_array().tolist() for T in state.camera_poses]
        doc["points"] = np.asarray(state.points).tolist()
        doc["covariances"] = np.asarray(state.covariances).tolist()
        doc["point_ids"] = [int(j) for j in state.point_ids]
    if state.init is not None:
        doc["init"] = {"scale": state.init.scale, "extrinsics": _se3(state.init.extrinsics)}
    (directory / f"checkpoint_{stage}.json").write_text(json.dumps(doc, indent=1) + "\n")


def _load_checkpoint(directory, stage):
    path = Path(directory) / f"checkpoint_{stage}.json"
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint for stage {stage!r} in {directory}")
    doc = json.loads(path.read_text())
    state = PipelineState()
    if "lidar_poses" in doc:
        state.lidar_poses = [Se3.from_array(r) for r in doc["lidar_poses"]]
    if "intrinsics" in doc:
        state.intrinsics = io.intrinsics_from_dict(doc["intrinsics"])
        state.camera_poses = [Se3.from_array(r) for r in doc["camera_poses"]]
        state.points = np.array(doc["points"], dtype=float).reshape(-1, 3)
        state.covariances = np.array(doc["covariances"], dtype=float).reshape(-1, 3, 3)
        state.point_ids = doc["point_ids"]
    if "init" in doc:
        state.init = ScaledInit(doc["init"]["scale"], io.se3_from_dict(doc["init"]["extrinsics"]))
    return state, doc["reports"]


# ---------------------------------------------------------------------------
# stages


def _stage_lidar(dataset, cfg: PipelineConfig, state, indices):
    if dataset.lidar_poses is not None:
        state.lidar_poses = list(dataset.lidar_poses)
        return {"source": "provided", "converged": True}
    guesses = relative_lidar_guesses(dataset.camera_poses, dataset.initial_extrinsics, dataset.initial_scale)
    traj = estimate_trajectory(dataset.clouds, guesses, cfg.lidar.icp, cfg.threads)
    rep = {"source": "icp", "icp_converged": bool(traj.converged)}
    if cfg.lidar.refine:
        traj = refine_trajectory(dataset.clouds, traj, cfg.lidar.refinement, cfg.threads)
        rep["refine_converged"] = bool(traj.converged)
    rep["converged"] = all(v for k, v in rep.items() if k.endswith("converged"))
    state.lidar_poses = traj.poses
    return rep


def _stage_visual(dataset, cfg, state):
    res = bundle_adjust_visual(dataset.tracks, dataset.camera_poses, dataset.intrinsics, cfg.visual)
    state.intrinsics = res.intrinsics
    state.camera_poses = res.poses
    state.points = np.array([p.position for p in res.points]).reshape(-1, 3)
    state.covariances = np.array([p.covariance for p in res.points]).reshape(-1, 3, 3)
    state.point_ids = [p.point_id for p in res.points]
    r = res.report
    return {
        "initial_cost": _f(r.initial_cost),
        "final_cost": _f(r.final_cost),
        "iterations": r.iterations,
        "termination_reason": r.termination_reason,
        "converged": bool(r.converged),
        "n_points": len(res.points),
        "dropped": [[int(pid), why] for pid, why in res.dropped],
        "intrinsics": io.intrinsics_to_dict(res.intrinsics),
    }


def _stage_init(dataset, cfg, state, indices):
    rep = {}
    X0 = dataset.initial_extrinsics
    try:
        s_eq, rms = recover_scale(state.camera_poses, state.lidar_poses, X0)
        rep["recovered_scale"] = _f(s_eq)
        rep["recovered_scale_rms"] = _f(rms)
    except DegenerateMotion:
        if dataset.initial_scale is None:
            raise
        s_eq = None
        rep["recovered_scale"] = None
    if dataset.initial_scale is not None:
        s0, rep["scale_source"] = float(dataset.initial_scale), "manifest"
    else:
        s0, rep["scale_source"] = s_eq, "recovered"
    res = refine_scale_extrinsics(state.points, state.camera_poses, indices, state.lidar_poses, ScaledInit(s0, X0), cfg.init, state.covariances)
    state.init = ScaledInit(res.scale, res.extrinsics)
    state.camera_poses = res.camera_poses
    state.points = res.points
    state.covariances = res.covariances
    rep.update(
        {
            "initial_scale": _f(s0),
            "scale": _f(res.scale),
            "extrinsics": _se3(res.extrinsics),
            "converged": bool(res.converged),
            "rounds": [
                {"scale": _f(h.scale), "extrinsics": _se3(h.extrinsics), "cost": _f(h.cost), "valid_pairs": int(h.valid_pairs)}
                for h in res.iteration_log
            ],
        }
    )
    return rep


def _stage_joint(dataset, cfg, state, indices):
    by_id = {t.point_id: t for t in dataset.tracks}
    tracks = [by_id[j] for j in state.point_ids]
    problem = CalibrationProblem(
        state.intrinsics, state.init.extrinsics, state.camera_poses, state.points, state.covariances, tracks, state.lidar_poses, cfg.joint.alpha
    )
    res = solve_joint(problem, indices, cfg.joint)
    state.joint = res
    rep = res.report.to_dict()
    rep.pop("segments")
    rep["segments"] = [{"iterations": s.iterations, "termination_reason": s.termination_reason, "final_cost": _f(s.final_cost)} for s in res.report.segments]
    return rep


def run_pipeline(dataset: io.CalibrationDataset, cfg: Optional[PipelineConfig] = None, checkpoint_dir=None, start: str = "lidar", stop: str = "joint"):
    """Run the stages ``start`` through ``stop``; returns ``(RunReport, timings, state)``.

    Stage failures are recorded in the report rather than raised.
    """
    cfg = cfg or PipelineConfig()
    for name in (start, stop):
        if name not in STAGES:
            raise ValueError(f"unknown stage {name!r}; choose from {STAGES}")
    if STAGES.index(stop) < STAGES.index(start):
        raise ValueError(f"stage {stop!r} comes before {start!r}")
    report = RunReport(status="running", dataset=dataset.name, config=cfg.to_dict())
    timings = {}
    first = STAGES.index(start)
    if first > 0:
        state, stage_reports = _load_checkpoint(checkpoint_dir, STAGES[first - 1])
        report.stages.update({k: v for k, v in stage_reports.items() if STAGES.index(k) < first})
    else:
        state = PipelineState()
    t0 = time.perf_counter()
    indices = [build_index(c, cfg.threads) for c in dataset.clouds]
    timings["index"] = time.perf_counter() - t0
    stage = start
    try:
        for stage in STAGES[first : STAGES.index(stop) + 1]:
            t0 = time.perf_counter()
            if stage == "lidar":
                report.stages["lidar"] = _stage_lidar(dataset, cfg, state, indices)
            elif stage == "visual":
                report.stages["visual"] = _stage_visual(dataset, cfg, state)
            elif stage == "init":
                report.stages["init"] = _stage_init(dataset, cfg, state, indices)
            else:
                report.stages["joint"] = _stage_joint(dataset, cfg, state, indices)
            timings[stage] = time.perf_counter() - t0
            _save_checkpoint(checkpoint_dir, stage, state, report.stages)
    except DegenerateProblem as exc:
        report.status = "degenerate"
        report.degeneracy = {"status": "degenerate", "ratio": _f(exc.ratio), "weak_direction": [float(v) for v in exc.weak_direction]}
        report.error = {"stage": stage, "type": type(exc).__name__, "message": str(exc)}
        return report, timings, state
    except CalibrationFailure as exc:
        report.status = "failed"
        report.error = {"stage": stage, "type": type(exc).__name__, "message": str(exc)}
        return report, timings, state

    if stop == "joint":
        D, X = state.joint.intrinsics, state.joint.extrinsics
        report.degeneracy = state.joint.report.degeneracy.to_dict()
        converged = state.joint.report.converged and report.stages["init"]["converged"]
    else:
        D, X = state.intrinsics or dataset.intrinsics, (state.init.extrinsics if state.init is not None else dataset.initial_extrinsics)
        converged = all(r.get("converged", True) for r in report.stages.values())
    report.result = {"intrinsics": io.intrinsics_to_dict(D), "extrinsics": _se3(X)}
    if state.init is not None:
        report.result["scale"] = _f(state.init.scale)
    if dataset.gt is not None:
        report.evaluation = {"initial": _evaluate(cfg, dataset, dataset.intrinsics, dataset.initial_extrinsics)}
        if "visual" in report.stages:
            Dv = io.intrinsics_from_dict(report.stages["visual"]["intrinsics"])
            report.evaluation["visual"] = _evaluate(cfg, dataset, Dv, dataset.initial_extrinsics)
            if "init" in report.stages:
                Xi = io.se3_from_dict(report.stages["init"]["extrinsics"])
                report.evaluation["init"] = _evaluate(cfg, dataset, Dv, Xi)
        if stop == "joint":
            report.evaluation["final"] = _evaluate(cfg, dataset, D, X)
        if dataset.gt.scale is not None and "init" in report.stages:
            report.evaluation["scale_relative_error"] = abs(report.stages["init"]["scale"] / dataset.gt.scale - 1.0)
    report.status = "converged" if converged else "not_converged"
    return report, timings, state
