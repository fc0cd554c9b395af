"""File formats: PLY clouds, JSON poses/tracks/intrinsics/manifests, PPM images, KITTI scans."""
from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .cloud import PointCloud
from .errors import ParseError, SchemaError, UnsupportedLayout
from .geometry import CameraIntrinsics, Se3, project_jacobians, unproject
from .visual_ba import FeatureTrack

FORMAT_VERSION = 1

# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_FLOAT_ONLY = {"x", "y", "z"}
_ALLOWED = {"x", "y", "z", "intensity", "red", "green", "blue"}


@dataclass
class PlyData:
    points: np.ndarray
    intensity: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None

    def cloud(self) -> PointCloud:
        return PointCloud(self.points, self.intensity)


def _parse_ply_header(fh, path):
    first = fh.readline()
    if first.strip() != b"ply":
        raise ParseError(f"{path}: line 1: missing 'ply' magic")
    fmt = None
    count = None
    props = []
    element = None
    line_no = 1
    while True:
        raw = fh.readline()
        line_no += 1
        if not raw:
            raise ParseError(f"{path}: line {line_no}: header ended without 'end_header'")
        tokens = raw.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "end_header":
            break
        if key == "format":
            if len(tokens) != 3 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise UnsupportedLayout(f"{path}: line {line_no}: unsupported format {' '.join(tokens[1:])!r}")
            fmt = tokens[1]
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError(f"{path}: line {line_no}: malformed element line")
            element = tokens[1]
            if element != "vertex":
                raise UnsupportedLayout(f"{path}: line {line_no}: unsupported element {element!r} (only 'vertex')")
            try:
                count = int(tokens[2])
            except ValueError:
                raise ParseError(f"{path}: line {line_no}: vertex count {tokens[2]!r} is not an integer") from None
        elif key == "property":
            if element != "vertex":
                raise ParseError(f"{path}: line {line_no}: property outside the vertex element")
            if len(tokens) != 3 or tokens[1] == "list":
                raise UnsupportedLayout(f"{path}: line {line_no}: unsupported property {' '.join(tokens[1:])!r}")
            typ, name = tokens[1], tokens[2]
            if typ not in _PLY_TYPES:
                raise UnsupportedLayout(f"{path}: line {line_no}: property {name!r} has unknown type {typ!r}")
            if name not in _ALLOWED:
                raise UnsupportedLayout(f"{path}: line {line_no}: unsupported property {name!r}")
            if name in _FLOAT_ONLY and _PLY_TYPES[typ] not in ("f4", "f8"):
                raise UnsupportedLayout(f"{path}: line {line_no}: property {name!r} must be float32 or float64, got {typ!r}")
            props.append((name, _PLY_TYPES[typ]))
        else:
            raise ParseError(f"{path}: line {line_no}: unknown header keyword {key!r}")
    if fmt is None:
        raise ParseError(f"{path}: header has no format line")
    if count is None:
        raise ParseError(f"{path}: header declares no vertex element")
    names = [p[0] for p in props]
    missing = [c for c in "xyz" if c not in names]
    if missing:
        raise UnsupportedLayout(f"{path}: vertex element lacks properties {missing}")
    return fmt, count, props, line_no


def read_ply(path) -> PlyData:
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, count, props, header_lines = _parse_ply_header(fh, path)
        dtype = np.dtype([(name, "<" + code) for name, code in props])
        if fmt == "binary_little_endian":
            offset = fh.tell()
            payload = fh.read()
            need = count * dtype.itemsize
            if len(payload) < need:
                raise ParseError(
                    f"{path}: byte offset {offset + len(payload)}: expected {count} vertices "
                    f"({need} bytes), found {len(payload) // dtype.itemsize}"
                )
            data = np.frombuffer(payload[:need], dtype=dtype)
        else:
            data = np.empty(count, dtype=dtype)
            for k in range(count):
                raw = fh.readline()
                line_no = header_lines + k + 1
                if not raw:
                    raise ParseError(f"{path}: line {line_no}: expected {count} vertices, found {k}")
                tokens = raw.split()
                if len(tokens) != len(props):
                    raise ParseError(f"{path}: line {line_no}: expected {len(props)} values, found {len(tokens)}")
                try:
                    data[k] = tuple(float(t) if code[0] == "f" else int(t) for t, (_, code) in zip(tokens, props))
                except ValueError as exc:
                    raise ParseError(f"{path}: line {line_no}: {exc}") from None
    names = dtype.names
    pts = np.stack([data["x"], data["y"], data["z"]], axis=-1).astype(np.float64)
    intensity = data["intensity"].astype(np.float64) if "intensity" in names else None
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([data["red"], data["green"], data["blue"]], axis=-1).astype(np.uint8)
    try:
        PointCloud(pts)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return PlyData(pts, intensity, colors)


def load_cloud(path) -> PointCloud:
    return read_ply(path).cloud()


def save_cloud(path, cloud: PointCloud, colors=None, binary: bool = True, dtype: str = "double"):
    """Write a vertex-only PLY with ``x, y, z``, optional ``intensity`` and ``red, green, blue``."""
    pts = np.asarray(cloud.points)
    fields = [("x", dtype), ("y", dtype), ("z", dtype)]
    if cloud.intensity is not None:
        fields.append(("intensity", dtype))
    if colors is not None:
        fields += [("red", "uchar"), ("green", "uchar"), ("blue", "uchar")]
    np_dtype = np.dtype([(name, "<" + _PLY_TYPES[typ]) for name, typ in fields])
    rec = np.empty(len(pts), dtype=np_dtype)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if cloud.intensity is not None:
        rec["intensity"] = cloud.intensity
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        rec["red"], rec["green"], rec["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(pts)}"]
    header += [f"property {typ} {name}" for name, typ in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            for row in rec:
                fh.write((" ".join(repr(v.item()) for v in row) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# JSON documents

_NUM = {"type": "number"}
_VERSION = {"type": "integer", "const": FORMAT_VERSION}

INTRINSICS_SCHEMA = {
    "type": "object",
    "properties": {k: _NUM for k in ("fx", "fy", "cx", "cy", "k1", "k2")} | {"width": {"type": "integer", "minimum": 1}, "height": {"type": "integer", "minimum": 1}},
    "required": ["fx", "fy", "cx", "cy", "k1", "k2", "width", "height"],
    "additionalProperties": False,
}
SE3_SCHEMA = {
    "type": "object",
    "properties": {
        "rotation": {"type": "array", "items": _NUM, "minItems": 4, "maxItems": 4},
        "translation": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
    },
    "required": ["rotation", "translation"],
    "additionalProperties": False,
}
POSES_SCHEMA = {
    "type": "object",
    "properties": {
        "format_version": _VERSION,
        "poses": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 7, "maxItems": 7}},
    },
    "required": ["format_version", "poses"],
    "additionalProperties": False,
}
_SIGMA = {
    "oneOf": [
        {"type": "number", "exclusiveMinimum": 0},
        {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
    ]
}
TRACKS_SCHEMA = {
    "type": "object",
    "properties": {
        "format_version": _VERSION,
        "tracks": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "point_id": {"type": "integer"},
                    "observations": {
                        "type": "array",
                        "minItems": 2,
                        "items": {
                            "type": "object",
                            "properties": {"frame": {"type": "integer", "minimum": 0}, "u": _NUM, "v": _NUM, "sigma": _SIGMA},
                            "required": ["frame", "u", "v"],
                            "additionalProperties": False,
                        },
                    },
                },
                "required": ["point_id", "observations"],
                "additionalProperties": False,
            },
        },
    },
    "required": ["format_version", "tracks"],
    "additionalProperties": False,
}
PARAMS_SCHEMA = {
    "type": "object",
    "properties": {
        "format_version": _VERSION,
        "intrinsics": INTRINSICS_SCHEMA,
        "extrinsics": SE3_SCHEMA,
        "scale": {"type": ["number", "null"]},
    },
    "required": ["format_version", "intrinsics", "extrinsics"],
    "additionalProperties": False,
}
MANIFEST_SCHEMA = {
    "type": "object",
    "properties": {
        "format_version": _VERSION,
        "name": {"type": "string"},
        "frames": {
            "type": "array",
            "minItems": 2,
            "items": {
                "type": "object",
                "properties": {
                    "cloud": {"type": "string"},
                    "image_size": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
                    "image": {"type": "string"},
                },
                "required": ["cloud", "image_size"],
                "additionalProperties": False,
            },
        },
        "tracks": {"type": "string"},
        "camera_poses": {"type": "string"},
        "lidar_poses": {"type": "string"},
        "intrinsics": INTRINSICS_SCHEMA,
        "initial_extrinsics": SE3_SCHEMA,
        "initial_scale": {"type": "number", "exclusiveMinimum": 0},
        "gt": {
            "type": "object",
            "properties": {
                "intrinsics": INTRINSICS_SCHEMA,
                "extrinsics": SE3_SCHEMA,
                "scale": {"type": "number", "exclusiveMinimum": 0},
                "lidar_poses": {"type": "string"},
            },
            "required": ["intrinsics", "extrinsics"],
            "additionalProperties": False,
        },
        "config": {"type": "object"},
    },
    "required": ["format_version", "frames", "tracks", "camera_poses", "intrinsics", "initial_extrinsics"],
    "additionalProperties": False,
}


def validate(doc, schema, source="document"):
    """Raise :class:`SchemaError` listing every violation of ``schema``."""
    errors = sorted(jsonschema.Draft7Validator(schema).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        violations = [f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}" for e in errors]
        raise SchemaError(violations, source)


def read_json(path, schema=None):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if schema is not None:
        validate(doc, schema, str(path))
    return doc


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def intrinsics_to_dict(D: CameraIntrinsics):
    return {"fx": D.fx, "fy": D.fy, "cx": D.cx, "cy": D.cy, "k1": D.k1, "k2": D.k2, "width": D.width, "height": D.height}


def intrinsics_from_dict(d) -> CameraIntrinsics:
    return CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"], d["k1"], d["k2"], int(d["width"]), int(d["height"]))


def se3_to_dict(T: Se3):
    return {"rotation": [float(v) for v in T.rotation], "translation": [float(v) for v in T.translation]}


def se3_from_dict(d) -> Se3:
    return Se3(np.array(d["rotation"], dtype=float), np.array(d["translation"], dtype=float))


def save_poses(path, poses):
    write_json(path, {"format_version": FORMAT_VERSION, "poses": [[float(v) for v in T.as_array()] for T in poses]})


def load_poses(path):
    doc = read_json(path, POSES_SCHEMA)
    return [Se3.from_array(row) for row in doc["poses"]]


def _sigma_to_json(cov):
    cov = np.asarray(cov)
    if cov[0, 1] == 0 and cov[1, 0] == 0 and cov[0, 0] == cov[1, 1]:
        sigma = float(np.sqrt(cov[0, 0]))
        if sigma * sigma == cov[0, 0]:
            return sigma
    return [[float(v) for v in row] for row in cov]


def tracks_to_json(tracks):
    out = []
    for tr in tracks:
        obs = []
        for f, px, cov in zip(tr.frames, tr.pixels, tr.covariances):
            obs.append({"frame": int(f), "u": float(px[0]), "v": float(px[1]), "sigma": _sigma_to_json(cov)})
        out.append({"point_id": int(tr.point_id), "observations": obs})
    return {"format_version": FORMAT_VERSION, "tracks": out}


def save_tracks(path, tracks):
    write_json(path, tracks_to_json(tracks))


def tracks_from_json(doc, source="tracks"):
    validate(doc, TRACKS_SCHEMA, source)
    tracks, problems = [], []
    for k, rec in enumerate(doc["tracks"]):
        obs = rec["observations"]
        frames = [o["frame"] for o in obs]
        pixels = [[o["u"], o["v"]] for o in obs]
        covs = []
        for o in obs:
            s = o.get("sigma", 1.0)
            covs.append(np.array(s, dtype=float) if isinstance(s, list) else (float(s) ** 2) * np.eye(2))
        try:
            tracks.append(FeatureTrack(rec["point_id"], frames, pixels, np.array(covs)))
        except ValueError as exc:
            problems.append(f"tracks/{k}: {exc}")
    if problems:
        raise SchemaError(problems, source)
    return tracks


def load_tracks(path):
    return tracks_from_json(read_json(path), str(path))


def save_params(path, intrinsics: CameraIntrinsics, extrinsics: Se3, scale=None):
    write_json(path, {"format_version": FORMAT_VERSION, "intrinsics": intrinsics_to_dict(intrinsics), "extrinsics": se3_to_dict(extrinsics), "scale": scale})


def load_params(path):
    """``(intrinsics, extrinsics, scale)`` from a parameter file or from a manifest's GT block."""
    doc = read_json(path)
    if "frames" in doc:
        validate(doc, MANIFEST_SCHEMA, str(path))
        if "gt" not in doc:
            raise SchemaError(["<root>: manifest has no 'gt' block"], str(path))
        gt = doc["gt"]
        return intrinsics_from_dict(gt["intrinsics"]), se3_from_dict(gt["extrinsics"]), gt.get("scale")
    validate(doc, PARAMS_SCHEMA, str(path))
    return intrinsics_from_dict(doc["intrinsics"]), se3_from_dict(doc["extrinsics"]), doc.get("scale")


# ---------------------------------------------------------------------------
# datasets and manifests


@dataclass
class GroundTruth:
    intrinsics: CameraIntrinsics
    extrinsics: Se3
    scale: Optional[float] = None
    lidar_poses: Optional[list] = None


@dataclass
class CalibrationDataset:
    """Everything the pipeline consumes, independent of where it came from."""

    clouds: list
    tracks: list
    camera_poses: list
    intrinsics: CameraIntrinsics
    initial_extrinsics: Se3
    initial_scale: Optional[float] = None
    lidar_poses: Optional[list] = None
    gt: Optional[GroundTruth] = None
    image_sizes: Optional[list] = None
    images: Optional[list] = None  # paths, when present
    name: str = "dataset"
    config: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return len(self.clouds)


@dataclass
class DatasetManifest:
    path: Path
    doc: dict

    @property
    def root(self):
        return self.path.parent

    def resolve(self, rel):
        return self.root / rel


def load_manifest(path) -> DatasetManifest:
    """Validate a manifest, its frame counts and file references."""
    path = Path(path)
    doc = read_json(path, MANIFEST_SCHEMA)
    man = DatasetManifest(path, doc)
    problems = []
    refs = [("tracks", doc["tracks"]), ("camera_poses", doc["camera_poses"])]
    refs += [(f"frames/{k}/cloud", fr["cloud"]) for k, fr in enumerate(doc["frames"])]
    refs += [(f"frames/{k}/image", fr["image"]) for k, fr in enumerate(doc["frames"]) if "image" in fr]
    if "lidar_poses" in doc:
        refs.append(("lidar_poses", doc["lidar_poses"]))
    if "gt" in doc and "lidar_poses" in doc["gt"]:
        refs.append(("gt/lidar_poses", doc["gt"]["lidar_poses"]))
    for key, rel in refs:
        if not man.resolve(rel).is_file():
            problems.append(f"{key}: file {rel!r} not found")
    sizes = {tuple(fr["image_size"]) for fr in doc["frames"]}
    D = doc["intrinsics"]
    if sizes != {(D["width"], D["height"])}:
        problems.append(f"frames: image sizes {sorted(sizes)} do not all match the intrinsics ({D['width']}x{D['height']})")
    if problems:
        raise SchemaError(problems, str(path))
    return man


def load_dataset(path_or_manifest) -> CalibrationDataset:
    man = path_or_manifest if isinstance(path_or_manifest, DatasetManifest) else load_manifest(path_or_manifest)
    doc = man.doc
    n = len(doc["frames"])
    clouds = [load_cloud(man.resolve(fr["cloud"])) for fr in doc["frames"]]
    tracks = load_tracks(man.resolve(doc["tracks"]))
    cams = load_poses(man.resolve(doc["camera_poses"]))
    lidar = load_poses(man.resolve(doc["lidar_poses"])) if "lidar_poses" in doc else None
    problems = []
    if len(cams) != n:
        problems.append(f"camera_poses: {len(cams)} poses for {n} frames")
    if lidar is not None and len(lidar) != n:
        problems.append(f"lidar_poses: {len(lidar)} poses for {n} frames")
    for tr in tracks:
        if np.any(tr.frames >= n):
            problems.append(f"tracks: point {tr.point_id} references frame {int(tr.frames.max())} of {n}")
    gt = None
    if "gt" in doc:
        g = doc["gt"]
        gt_lidar = load_poses(man.resolve(g["lidar_poses"])) if "lidar_poses" in g else None
        gt = GroundTruth(intrinsics_from_dict(g["intrinsics"]), se3_from_dict(g["extrinsics"]), g.get("scale"), gt_lidar)
    if problems:
        raise SchemaError(problems, str(man.path))
    images = [str(man.resolve(fr["image"])) for fr in doc["frames"]] if all("image" in fr for fr in doc["frames"]) else None
    return CalibrationDataset(
        clouds=clouds,
        tracks=tracks,
        camera_poses=cams,
        intrinsics=intrinsics_from_dict(doc["intrinsics"]),
        initial_extrinsics=se3_from_dict(doc["initial_extrinsics"]),
        initial_scale=doc.get("initial_scale"),
        lidar_poses=lidar,
        gt=gt,
        image_sizes=[tuple(fr["image_size"]) for fr in doc["frames"]],
        images=images,
        name=doc.get("name", man.path.stem),
        config=doc.get("config", {}),
    )


def save_dataset(dataset: CalibrationDataset, out_dir, images=None, binary: bool = True) -> Path:
    """Write clouds, tracks, poses and a manifest into ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    frames = []
    D = dataset.intrinsics
    for i, cloud in enumerate(dataset.clouds):
        rel = f"clouds/frame_{i:04d}.ply"
        save_cloud(out / rel, cloud, binary=binary)
        rec = {"cloud": rel, "image_size": [D.width, D.height]}
        if images is not None:
            (out / "images").mkdir(exist_ok=True)
            img_rel = f"images/frame_{i:04d}.ppm"
            save_ppm(out / img_rel, images[i])
            rec["image"] = img_rel
        frames.append(rec)
    save_tracks(out / "tracks.json", dataset.tracks)
    save_poses(out / "camera_poses.json", dataset.camera_poses)
    doc = {
        "format_version": FORMAT_VERSION,
        "name": dataset.name,
        "frames": frames,
        "tracks": "tracks.json",
        "camera_poses": "camera_poses.json",
        "intrinsics": intrinsics_to_dict(D),
        "initial_extrinsics": se3_to_dict(dataset.initial_extrinsics),
    }
    if dataset.initial_scale is not None:
        doc["initial_scale"] = float(dataset.initial_scale)
    if dataset.lidar_poses is not None:
        save_poses(out / "lidar_poses.json", dataset.lidar_poses)
        doc["lidar_poses"] = "lidar_poses.json"
    if dataset.gt is not None:
        g = dataset.gt
        gt = {"intrinsics": intrinsics_to_dict(g.intrinsics), "extrinsics": se3_to_dict(g.extrinsics)}
        if g.scale is not None:
            gt["scale"] = float(g.scale)
        if g.lidar_poses is not None:
            save_poses(out / "gt_lidar_poses.json", g.lidar_poses)
            gt["lidar_poses"] = "gt_lidar_poses.json"
        doc["gt"] = gt
    if dataset.config:
        doc["config"] = dataset.config
    write_json(out / "manifest.json", doc)
    return out / "manifest.json"


# ---------------------------------------------------------------------------
# images and colourisation


def save_ppm(path, image):
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img.reshape(h, w, 3)).tobytes())


def load_ppm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise ParseError(f"{path}: byte offset {pos}: truncated PPM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P6":
        raise UnsupportedLayout(f"{path}: only binary PPM (P6) images are supported, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise UnsupportedLayout(f"{path}: only 8-bit PPM images are supported (maxval {maxval})")
    pos += 1
    need = w * h * 3
    if len(data) - pos < need:
        raise ParseError(f"{path}: byte offset {len(data)}: expected {need} pixel bytes, found {len(data) - pos}")
    return np.frombuffer(data[pos : pos + need], dtype=np.uint8).reshape(h, w, 3).copy()


@dataclass
class ColoredCloud:
    points: np.ndarray
    colors: np.ndarray  # (N, 3) uint8, zero where uncoloured
    colored: np.ndarray  # bool mask

    def save(self, path, binary=True):
        mask = self.colored
        save_cloud(path, PointCloud(self.points[mask]), colors=self.colors[mask], binary=binary)


def colorize(cloud: PointCloud, image, intrinsics: CameraIntrinsics, extrinsics: Se3, lidar_pose: Optional[Se3] = None) -> ColoredCloud:
    """Give each LiDAR point the colour of the nearest pixel it projects to.

    ``extrinsics`` maps camera into LiDAR coordinates; ``lidar_pose`` (default
    identity) maps the cloud's frame into the LiDAR frame the image was taken in.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    pts = cloud.points
    local = pts if lidar_pose is None else lidar_pose.transform(pts)
    cam = extrinsics.inverse().transform(local)
    ok = cam[:, 2] > 0
    # Radial distortion is not monotone far outside the field of view, so
    # points beyond the widest image ray could fold back into the frame.
    corners = np.array([[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]])
    rays = unproject(corners, intrinsics)
    r_max = np.max(np.linalg.norm(rays[:, :2] / rays[:, 2:3], axis=-1)) * 1.01
    xy = np.zeros((len(pts), 2))
    xy[ok] = cam[ok, :2] / cam[ok, 2:3]
    ok &= np.linalg.norm(xy, axis=-1) <= r_max
    uv = np.full((len(pts), 2), -1.0)
    if ok.any():
        uv[ok] = project_jacobians(cam[ok], intrinsics.as_array())[0]
    ui = np.rint(uv[:, 0]).astype(np.int64)
    vi = np.rint(uv[:, 1]).astype(np.int64)
    ok &= (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    colors = np.zeros((len(pts), 3), dtype=np.uint8)
    colors[ok] = img[vi[ok], ui[ok]]
    return ColoredCloud(pts, colors, ok)


# ---------------------------------------------------------------------------
# KITTI odometry layout


def load_kitti_velodyne(path) -> PointCloud:
    """A KITTI ``velodyne/*.bin`` scan: float32 records ``(x, y, z, intensity)``."""
    data = Path(path).read_bytes()
    if len(data) % 16:
        raise ParseError(f"{path}: byte offset {len(data) - len(data) % 16}: size is not a multiple of 16-byte records")
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3])


def load_kitti_calib(path, width: int, height: int, camera: str = "P2"):
    """Intrinsics and camera-to-LiDAR extrinsics from a KITTI ``calib.txt``."""
    entries = {}
    for k, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        key, _, rest = line.partition(":")
        try:
            entries[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError:
            raise ParseError(f"{path}: line {k}: non-numeric calibration entry") from None
    if camera not in entries:
        raise ParseError(f"{path}: missing projection matrix {camera!r}")
    tr_key = "Tr_velo_to_cam" if "Tr_velo_to_cam" in entries else "Tr"
    if tr_key not in entries:
        raise ParseError(f"{path}: missing 'Tr' (velodyne-to-camera) entry")
    P = entries[camera].reshape(3, 4)
    D = CameraIntrinsics(P[0, 0], P[1, 1], P[0, 2], P[1, 2], 0.0, 0.0, width, height)
    Tr = np.eye(4)
    Tr[:3, :] = entries[tr_key].reshape(3, 4)
    return D, Se3.from_matrix(np.linalg.inv(Tr))


def digest_directory(path) -> str:
    """SHA-256 over relative file names and contents, in sorted order."""
    h = hashlib.sha256()
    root = Path(path)
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
