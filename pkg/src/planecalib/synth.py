"""Synthetic planar scenes with exact ground truth.

Scenes are defined in a scene frame ``S`` (z up). The first camera frame is
the visual world frame and the first LiDAR frame is the LiDAR world frame,
so every exported pose maps world coordinates into frame ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .cloud import PointCloud
from .errors import InvisibleScene, SceneSpecError
from .geometry import CameraIntrinsics, Se3, axis_angle_quat, compose, inverse, project, quat_to_matrix, unproject
from .visual_ba import FeatureTrack

MIN_POINTS_PER_FRAME = 8
MIN_HITS_PER_PLANE = 50


@dataclass
class PlaneSpec:
    """Rectangle on the plane ``normal . x = offset``.

    In-plane coordinates are measured from ``offset * normal`` along
    ``u_axis`` and ``normal x u_axis``.
    """

    normal: np.ndarray
    offset: float
    u_axis: np.ndarray
    extent: tuple  # (umin, umax, vmin, vmax)
    visual_points: int = 150
    color: tuple = (200, 200, 200)

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        self.normal = n / np.linalg.norm(n)
        u = np.asarray(self.u_axis, dtype=float)
        u = u - self.normal * (u @ self.normal)
        self.u_axis = u / np.linalg.norm(u)
        self.offset = float(self.offset)
        self.extent = tuple(float(e) for e in self.extent)

    @property
    def v_axis(self):
        return np.cross(self.normal, self.u_axis)

    @property
    def origin(self):
        return self.offset * self.normal

    @property
    def area(self):
        u0, u1, v0, v1 = self.extent
        return (u1 - u0) * (v1 - v0)

    def point(self, uv):
        uv = np.atleast_2d(uv)
        return self.origin + uv[:, :1] * self.u_axis + uv[:, 1:] * self.v_axis

    def distance_to_rectangle(self, p):
        p = np.atleast_2d(p)
        rel = p - self.origin
        u = np.clip(rel @ self.u_axis, self.extent[0], self.extent[1])
        v = np.clip(rel @ self.v_axis, self.extent[2], self.extent[3])
        return np.linalg.norm(p - self.point(np.stack([u, v], axis=-1)), axis=-1)


@dataclass
class Waypoint:
    position: np.ndarray
    target: np.ndarray
    roll_deg: float = 0.0
    up: tuple = (0.0, 0.0, 1.0)


@dataclass
class NoiseSpec:
    pixel_sigma: float = 0.5
    lidar_sigma: float = 0.005
    outlier_fraction: float = 0.0


@dataclass
class InitSpec:
    """How the pipeline's initial values are derived from ground truth."""

    rotation_deg: float = 5.0
    translation_m: float = 0.4
    scale_factor: Optional[float] = None  # None: leave the scale to recover_scale
    focal_scale: float = 1.03
    center_principal_point: bool = True
    zero_distortion: bool = True
    exact: bool = False  # all initial values equal ground truth


@dataclass
class SceneSpec:
    planes: list
    waypoints: list
    gt_intrinsics: CameraIntrinsics
    gt_extrinsics: Se3
    gt_scale: float = 2.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    lidar_density: float = 100.0
    lidar_max_range: float = 40.0
    edge_margin: float = 0.5
    min_depth: float = 0.5
    init: InitSpec = field(default_factory=InitSpec)
    seed: int = 0
    name: str = "custom"

    @property
    def n_frames(self):
        return len(self.waypoints)

    def validate(self):
        problems = []
        if len(self.planes) < 1:
            problems.append("scene needs at least one plane")
        if len(self.waypoints) < 2:
            problems.append("scene needs at least two frames")
        if self.noise.pixel_sigma < 0 or self.noise.lidar_sigma < 0:
            problems.append("noise sigmas must be non-negative")
        if not 0 <= self.noise.outlier_fraction < 1:
            problems.append("outlier_fraction must lie in [0, 1)")
        if not self.gt_scale > 0:
            problems.append("gt_scale must be positive")
        if not self.lidar_density > 0:
            problems.append("lidar_density must be positive")
        if problems:
            raise SceneSpecError("; ".join(problems))


@dataclass
class SyntheticDataset:
    spec: SceneSpec
    clouds: list
    cloud_plane_ids: list
    tracks: list
    track_plane_ids: np.ndarray
    track_is_outlier: np.ndarray
    gt_points: np.ndarray  # first-camera frame, metric
    gt_camera_poses: list
    sfm_camera_poses: list  # translations divided by gt_scale
    gt_lidar_poses: list
    gt_intrinsics: CameraIntrinsics
    gt_extrinsics: Se3
    gt_scale: float
    initial_intrinsics: CameraIntrinsics
    initial_extrinsics: Se3
    initial_scale: Optional[float]
    camera_to_scene: list

    @property
    def n_frames(self):
        return len(self.clouds)


def look_at(position, target, up=(0.0, 0.0, 1.0), roll_deg=0.0) -> Se3:
    """Camera-to-scene transform for a camera at ``position`` looking at ``target``."""
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    if roll_deg:
        R = R @ quat_to_matrix(axis_angle_quat([0, 0, 1], np.radians(roll_deg)))
    return Se3.from_rt(R, position)


def _frames(spec: SceneSpec):
    cam_to_scene = [look_at(w.position, w.target, w.up, w.roll_deg) for w in spec.waypoints]
    X = spec.gt_extrinsics
    Xinv = inverse(X)
    lidar_to_scene = [compose(c, Xinv) for c in cam_to_scene]
    cam_poses = [compose(inverse(c), cam_to_scene[0]) for c in cam_to_scene]
    lidar_poses = [compose(inverse(l), lidar_to_scene[0]) for l in lidar_to_scene]
    cam_poses[0] = Se3.identity()
    lidar_poses[0] = Se3.identity()
    return cam_to_scene, lidar_to_scene, cam_poses, lidar_poses


def _sample_rect(plane: PlaneSpec, n, rng, margin=0.0):
    u0, u1, v0, v1 = plane.extent
    u = rng.uniform(u0 + margin, u1 - margin, n)
    v = rng.uniform(v0 + margin, v1 - margin, n)
    return plane.point(np.stack([u, v], axis=-1))


def _visual_candidates(spec: SceneSpec, rng):
    pts, ids = [], []
    for k, plane in enumerate(spec.planes):
        if plane.visual_points <= 0:
            continue
        cand = _sample_rect(plane, 4 * plane.visual_points, rng, spec.edge_margin)
        keep = np.ones(len(cand), dtype=bool)
        for m, other in enumerate(spec.planes):
            if m != k:
                keep &= other.distance_to_rectangle(cand) >= spec.edge_margin
        cand = cand[keep][: plane.visual_points]
        pts.append(cand)
        ids.append(np.full(len(cand), k))
    if not pts:
        return np.zeros((0, 3)), np.zeros(0, dtype=int)
    return np.concatenate(pts), np.concatenate(ids)


def _observe(points_c0, cam_poses, D: CameraIntrinsics, min_depth):
    """Per point: frames where it projects inside the image, and the exact pixels."""
    frames = [[] for _ in range(len(points_c0))]
    pixels = [[] for _ in range(len(points_c0))]
    for i, T in enumerate(cam_poses):
        pc = T.transform(points_c0)
        vis = pc[:, 2] > min_depth
        if not np.any(vis):
            continue
        uv = np.full((len(pc), 2), np.nan)
        uv[vis] = project(pc[vis], D)
        inside = vis & (uv[:, 0] >= 1) & (uv[:, 0] <= D.width - 1) & (uv[:, 1] >= 1) & (uv[:, 1] <= D.height - 1)
        for j in np.flatnonzero(inside):
            frames[j].append(i)
            pixels[j].append(uv[j])
    return frames, pixels


def _perturb(T: Se3, rotation_deg, translation_m, rng) -> Se3:
    axis = rng.normal(size=3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    dq = Se3(axis_angle_quat(axis, np.radians(rotation_deg)))
    rotated = compose(dq, Se3(T.rotation))
    return Se3(rotated.rotation, T.translation + translation_m * direction)


def generate(spec: SceneSpec) -> SyntheticDataset:
    """Sample LiDAR scans and feature tracks for ``spec`` (deterministic in ``spec.seed``)."""
    spec.validate()
    streams = np.random.SeedSequence(spec.seed).spawn(6)
    rng_lidar, rng_vis, rng_pix, rng_out, rng_init, rng_outpix = (np.random.default_rng(s) for s in streams)
    D = spec.gt_intrinsics
    X = spec.gt_extrinsics
    cam_to_scene, lidar_to_scene, cam_poses, lidar_poses = _frames(spec)

    # LiDAR scans, in each scan's own frame
    clouds, cloud_ids = [], []
    for i, L in enumerate(lidar_to_scene):
        pts, ids = [], []
        for k, plane in enumerate(spec.planes):
            n = int(round(spec.lidar_density * plane.area))
            p = _sample_rect(plane, n, rng_lidar)
            p = p[np.linalg.norm(p - L.translation, axis=1) <= spec.lidar_max_range]
            pts.append(p)
            ids.append(np.full(len(p), k))
        p = inverse(L).transform(np.concatenate(pts))
        if spec.noise.lidar_sigma > 0:
            p = p + rng_lidar.normal(scale=spec.noise.lidar_sigma, size=p.shape)
        ids = np.concatenate(ids)
        hit = np.bincount(ids, minlength=len(spec.planes))
        if np.sum(hit >= MIN_HITS_PER_PLANE) < min(2, len(spec.planes)):
            raise InvisibleScene(f"LiDAR frame {i} hits fewer than 2 planes")
        clouds.append(PointCloud(p))
        cloud_ids.append(ids)

    # feature tracks on the planes
    scene_to_c0 = inverse(cam_to_scene[0])
    cand, cand_plane = _visual_candidates(spec, rng_vis)
    pts_c0 = scene_to_c0.transform(cand) if len(cand) else cand
    frames, pixels = _observe(pts_c0, cam_poses, D, spec.min_depth)
    sigma = spec.noise.pixel_sigma
    track_sigma = sigma if sigma > 0 else 1.0

    tracks, gt_pts, plane_ids, outlier = [], [], [], []

    def add_track(p_c0, plane_id, frs, pxs, is_outlier, rng):
        pxs = np.asarray(pxs)
        if sigma > 0:
            pxs = pxs + rng.normal(scale=sigma, size=pxs.shape)
        tracks.append(FeatureTrack.isotropic(len(tracks), frs, pxs, track_sigma))
        gt_pts.append(p_c0)
        plane_ids.append(plane_id)
        outlier.append(is_outlier)

    for j in range(len(cand)):
        if len(frames[j]) >= 2:
            add_track(pts_c0[j], int(cand_plane[j]), frames[j], pixels[j], False, rng_pix)
    n_inliers = len(tracks)

    f = spec.noise.outlier_fraction
    n_out = int(round(f / (1.0 - f) * n_inliers)) if f > 0 else 0
    attempts = 0
    while n_out and sum(outlier) < n_out and attempts < 50:
        attempts += 1
        k = int(rng_out.integers(len(spec.planes)))
        plane = spec.planes[k]
        base = _sample_rect(plane, 1, rng_out, spec.edge_margin)
        shift = rng_out.uniform(0.5, 1.0) * rng_out.choice([-1.0, 1.0])
        p = scene_to_c0.transform(base + shift * plane.normal)
        fr, px = _observe(p, cam_poses, D, spec.min_depth)
        if len(fr[0]) >= 2:
            attempts = 0
            add_track(p[0], k, fr[0], px[0], True, rng_outpix)

    counts = np.zeros(len(cam_poses), dtype=int)
    for tr in tracks:
        counts[tr.frames] += 1
    if len(counts) and counts.min() < MIN_POINTS_PER_FRAME:
        raise InvisibleScene(f"camera frame {int(np.argmin(counts))} sees only {counts.min()} tracked points")

    s = spec.gt_scale
    sfm_poses = [Se3(T.rotation, T.translation / s) for T in cam_poses]

    init = spec.init
    if init.exact:
        D0, X0, s0 = D, X, s
    else:
        X0 = _perturb(X, init.rotation_deg, init.translation_m, rng_init)
        fx, fy = D.fx * init.focal_scale, D.fy * init.focal_scale
        cx, cy = (D.width / 2.0, D.height / 2.0) if init.center_principal_point else (D.cx, D.cy)
        k1, k2 = (0.0, 0.0) if init.zero_distortion else (D.k1, D.k2)
        D0 = CameraIntrinsics(fx, fy, cx, cy, k1, k2, D.width, D.height)
        s0 = None if init.scale_factor is None else s * init.scale_factor

    return SyntheticDataset(
        spec=spec,
        clouds=clouds,
        cloud_plane_ids=cloud_ids,
        tracks=tracks,
        track_plane_ids=np.array(plane_ids, dtype=int),
        track_is_outlier=np.array(outlier, dtype=bool),
        gt_points=np.array(gt_pts).reshape(-1, 3),
        gt_camera_poses=cam_poses,
        sfm_camera_poses=sfm_poses,
        gt_lidar_poses=lidar_poses,
        gt_intrinsics=D,
        gt_extrinsics=X,
        gt_scale=s,
        initial_intrinsics=D0,
        initial_extrinsics=X0,
        initial_scale=s0,
        camera_to_scene=cam_to_scene,
    )


# ---------------------------------------------------------------------------
# preset scenes

DEFAULT_INTRINSICS = CameraIntrinsics(fx=500.0, fy=502.0, cx=318.5, cy=243.2, k1=-0.12, k2=0.03, width=640, height=480)


def default_extrinsics() -> Se3:
    # camera (x right, y down, z forward) -> LiDAR (x forward, y left, z up), plus a small tilt
    R = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    tilt = quat_to_matrix(axis_angle_quat([0.3, -0.5, 0.8], np.radians(3.0)))
    return Se3.from_rt(tilt @ R, [0.08, -0.12, -0.05])


def _wall(azimuth_deg, distance, half_width, height, visual_points=150, color=(180, 80, 60)):
    a = np.radians(azimuth_deg)
    n = -np.array([np.cos(a), np.sin(a), 0.0])
    u = np.array([-np.sin(a), np.cos(a), 0.0])
    return PlaneSpec(n, -distance, u, (-half_width, half_width, -height, 0.0), visual_points, color)


def _courtyard():
    planes = [
        PlaneSpec([0, 0, 1], 0.0, [1, 0, 0], (-8, 8, -8, 8), 600, (90, 160, 90)),
        _wall(-35.0, 6.0, 3.0, 5.0, 200, (200, 90, 70)),
        _wall(25.0, 6.0, 3.0, 5.0, 200, (70, 90, 200)),
        _wall(85.0, 6.0, 3.0, 5.0, 200, (200, 200, 80)),
    ]
    waypoints = []
    n = 8
    for i in range(n):
        s = i / (n - 1)
        theta = np.radians(-40 + 140 * s)
        pos = np.array([1.0 * np.cos(theta), 1.0 * np.sin(theta), 1.5 + 0.3 * np.sin(3 * theta)])
        yaw = np.radians(-30 + 110 * s)
        pitch = np.radians(-8 + 5 * np.sin(2.5 * i))
        look = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
        waypoints.append(Waypoint(pos, pos + look, roll_deg=6.0 * np.sin(1.7 * i)))
    return planes, waypoints


def _tunnel_waypoints(n, yaw_amp=0.0, pitch_amp=0.0):
    waypoints = []
    for i in range(n):
        pos = np.array([1.2 * i, 0.25 * np.sin(1.3 * i), 1.4 + 0.15 * np.cos(1.1 * i)])
        yaw = np.radians(yaw_amp * np.sin(0.9 * i)) if i else 0.0
        pitch = np.radians(pitch_amp * np.cos(1.4 * i)) if i else 0.0
        look = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
        waypoints.append(Waypoint(pos, pos + look, roll_deg=8.0 * np.sin(1.9 * i)))
    return waypoints


def _corridor():
    planes = [
        PlaneSpec([0, 0, 1], 0.0, [1, 0, 0], (-3, 30, -2.5, 2.5), 150, (90, 160, 90)),
        PlaneSpec([0, -1, 0], -2.5, [1, 0, 0], (-3, 30, -4, 0), 150, (200, 90, 70)),
        PlaneSpec([0, 1, 0], -2.5, [1, 0, 0], (-3, 30, 0, 4), 150, (70, 90, 200)),
        PlaneSpec([-1, 0, 0], -24.0, [0, 1, 0], (-2.5, 2.5, -4, 0), 60, (200, 200, 80)),
    ]
    return planes, _tunnel_waypoints(8, yaw_amp=6.0, pitch_amp=4.0)


def _degenerate_z():
    planes = [
        PlaneSpec([0, 0, 1], 0.0, [1, 0, 0], (-3, 40, -2.5, 2.5), 150, (90, 160, 90)),
        PlaneSpec([0, -1, 0], -2.5, [1, 0, 0], (-3, 40, -4, 0), 150, (200, 90, 70)),
        PlaneSpec([0, 1, 0], -2.5, [1, 0, 0], (-3, 40, 0, 4), 150, (70, 90, 200)),
    ]
    # camera 0 looks straight down the tunnel so every normal is orthogonal to its optical axis
    return planes, _tunnel_waypoints(8, yaw_amp=6.0, pitch_amp=4.0)


SCENES = {"courtyard": _courtyard, "corridor": _corridor, "degenerate_z": _degenerate_z}


def default_scene(kind: str = "courtyard", seed: int = 0, **overrides) -> SceneSpec:
    if kind not in SCENES:
        raise SceneSpecError(f"unknown scene kind {kind!r}; choose from {sorted(SCENES)}")
    planes, waypoints = SCENES[kind]()
    spec = SceneSpec(
        planes=planes,
        waypoints=waypoints,
        gt_intrinsics=DEFAULT_INTRINSICS,
        gt_extrinsics=default_extrinsics(),
        seed=seed,
        name=kind,
    )
    for key, value in overrides.items():
        if not hasattr(spec, key):
            raise SceneSpecError(f"unknown scene field {key!r}")
        setattr(spec, key, value)
    return spec


_SCENE_KEYS = {"format_version", "kind", "name", "seed", "planes", "waypoints", "gt_intrinsics", "gt_extrinsics", "gt_scale", "noise", "lidar_density", "lidar_max_range", "edge_margin", "min_depth", "init"}


def _sub(cls, doc, where):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise SceneSpecError(f"{where}: unknown keys {unknown}")
    return cls(**doc)


def scene_from_dict(doc) -> SceneSpec:
    """Build a scene from a JSON document.

    ``kind`` starts from a built-in scene; any other key replaces the
    corresponding field. Without ``kind``, ``planes``, ``waypoints``,
    ``gt_intrinsics`` and ``gt_extrinsics`` are required.
    """
    if not isinstance(doc, dict):
        raise SceneSpecError("scene document must be an object")
    unknown = sorted(set(doc) - _SCENE_KEYS)
    if unknown:
        raise SceneSpecError(f"unknown scene keys {unknown}")
    if doc.get("format_version", 1) != 1:
        raise SceneSpecError(f"unsupported scene format_version {doc['format_version']!r}")
    try:
        if "kind" in doc:
            spec = default_scene(doc["kind"], int(doc.get("seed", 0)))
        else:
            missing = [k for k in ("planes", "waypoints", "gt_intrinsics", "gt_extrinsics") if k not in doc]
            if missing:
                raise SceneSpecError(f"scene without 'kind' needs {missing}")
            spec = SceneSpec(planes=[], waypoints=[], gt_intrinsics=DEFAULT_INTRINSICS, gt_extrinsics=default_extrinsics())
        if "planes" in doc:
            spec.planes = [_sub(PlaneSpec, p, f"planes[{i}]") for i, p in enumerate(doc["planes"])]
        if "waypoints" in doc:
            spec.waypoints = [_sub(Waypoint, w, f"waypoints[{i}]") for i, w in enumerate(doc["waypoints"])]
        if "gt_intrinsics" in doc:
            g = dict(doc["gt_intrinsics"])
            spec.gt_intrinsics = CameraIntrinsics(**g)
        if "gt_extrinsics" in doc:
            g = doc["gt_extrinsics"]
            spec.gt_extrinsics = Se3(g["rotation"], g["translation"])
        if "noise" in doc:
            spec.noise = _sub(NoiseSpec, doc["noise"], "noise")
        if "init" in doc:
            spec.init = _sub(InitSpec, doc["init"], "init")
        for key in ("name", "seed", "gt_scale", "lidar_density", "lidar_max_range", "edge_margin", "min_depth"):
            if key in doc:
                setattr(spec, key, doc[key])
    except (TypeError, KeyError, ValueError) as exc:
        if isinstance(exc, SceneSpecError):
            raise
        raise SceneSpecError(f"invalid scene document: {exc}") from exc
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# rendering for colorisation checks


def plane_texture(plane: PlaneSpec, points, checker: float = 0.0):
    """Texture colour of scene-frame ``points`` on ``plane`` (uniform or checkerboard)."""
    base = np.asarray(plane.color, dtype=float)
    colors = np.broadcast_to(base, (len(points), 3)).copy()
    if checker > 0:
        rel = points - plane.origin
        cell = np.floor(rel @ plane.u_axis / checker) + np.floor(rel @ plane.v_axis / checker)
        dark = (cell.astype(np.int64) % 2) == 1
        colors[dark] = 255 - base
    return colors.astype(np.uint8)


def render_image(dataset: SyntheticDataset, frame: int, checker: float = 0.0, background=(0, 0, 0)):
    """Ray-cast frame ``frame`` with the ground-truth camera; returns ``(H, W, 3)`` uint8."""
    spec = dataset.spec
    D = dataset.gt_intrinsics
    u, v = np.meshgrid(np.arange(D.width, dtype=float), np.arange(D.height, dtype=float))
    pix = np.stack([u.ravel(), v.ravel()], axis=-1)
    f = unproject(pix, D)
    C = dataset.camera_to_scene[frame]
    dirs = f @ C.R.T
    origin = C.translation
    best = np.full(len(dirs), np.inf)
    img = np.broadcast_to(np.asarray(background, dtype=np.uint8), (len(dirs), 3)).copy()
    for plane in spec.planes:
        denom = dirs @ plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (plane.offset - origin @ plane.normal) / denom
        hit = np.isfinite(t) & (t > 0) & (t < best)
        if not np.any(hit):
            continue
        p = origin + t[hit, None] * dirs[hit]
        rel = p - plane.origin
        pu, pv = rel @ plane.u_axis, rel @ plane.v_axis
        u0, u1, v0, v1 = plane.extent
        inside = (pu >= u0) & (pu <= u1) & (pv >= v0) & (pv <= v1)
        idx = np.flatnonzero(hit)[inside]
        best[idx] = t[idx]
        img[idx] = plane_texture(plane, p[inside], checker)
    return img.reshape(D.height, D.width, 3)
