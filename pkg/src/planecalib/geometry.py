"""SE(3) and pinhole camera primitives.

Conventions used throughout the package:

* quaternions are stored ``[w, x, y, z]`` and kept unit-norm;
* an :class:`Se3` maps points ``p -> R p + t``; a pose named ``T_i`` maps
  world (first-frame) coordinates into frame ``i``;
* the extrinsic transform maps camera-frame points into the LiDAR frame;
* rotation increments are applied on the left, ``R <- Exp(w) R``, and
  translation increments additively, ``t <- t + dt``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidIntrinsics, NonPositiveDepth, UndistortDivergence

# ---------------------------------------------------------------------------
# quaternion / so(3) helpers (vectorised over a leading axis)


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion (Shepperd's method), ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, m in enumerate(flat):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[n] = q if q[0] >= 0 else -q
    out = quat_normalize(out)
    return out.reshape(R.shape[:-2] + (4,))


def so3_exp(w):
    """Rotation vector(s) to unit quaternion(s)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < 1e-8
    # sin(theta/2)/theta, series-expanded near zero
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * w], axis=-1)


def so3_log(q):
    """Unit quaternion(s) to rotation vector(s), angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0, -q, q)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., :1])
    small = s < 1e-12
    factor = np.where(small, 2.0 / np.where(small, q[..., :1], 1.0), angle / np.where(small, 1.0, s))
    return factor * v


def axis_angle_quat(axis, angle_rad):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return so3_exp(axis * angle_rad)


# ---------------------------------------------------------------------------
# SE(3)


@dataclass(frozen=True)
class Se3:
    """Rigid transform stored as unit quaternion ``[w, x, y, z]`` plus translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("rotation quaternion must be finite and non-zero")
        if abs(norm - 1.0) > 1e-15:  # leaves already-normalised input bit-identical
            q = q / norm
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Se3:
        return cls()

    @classmethod
    def from_matrix(cls, M) -> Se3:
        M = np.asarray(M, dtype=float)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> Se3:
        return cls(matrix_to_quat(np.asarray(R, dtype=float)), t)

    @classmethod
    def from_array(cls, arr) -> Se3:
        arr = np.asarray(arr, dtype=float).reshape(7)
        return cls(arr[:4], arr[4:])

    @classmethod
    def exp(cls, rotation_vector, translation=(0.0, 0.0, 0.0)) -> Se3:
        return cls(so3_exp(np.asarray(rotation_vector, dtype=float)), translation)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def __matmul__(self, other: Se3) -> Se3:
        return compose(self, other)

    def inverse(self) -> Se3:
        return inverse(self)

    def transform(self, p):
        return transform(self, p)

    def is_identity(self) -> bool:
        return bool(np.all(self.translation == 0) and abs(self.rotation[0]) == 1.0)


def compose(a: Se3, b: Se3) -> Se3:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    q = quat_normalize(quat_multiply(a.rotation, b.rotation))
    return Se3(q, a.R @ b.translation + a.translation)


def inverse(t: Se3) -> Se3:
    q = quat_conjugate(t.rotation)
    return Se3(q, -(quat_to_matrix(q) @ t.translation))


def transform(t: Se3, p):
    p = np.asarray(p, dtype=float)
    return p @ t.R.T + t.translation


def se3_plus(x, delta):
    """Left increment of stacked ``[q, t]`` rows by ``[w, dt]`` rows."""
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    q = quat_normalize(quat_multiply(so3_exp(delta[..., :3]), x[..., :4]))
    return np.concatenate([q, x[..., 4:] + delta[..., 3:]], axis=-1)


def rotation_angle_between(a, b) -> float:
    """Angle in degrees of the relative rotation ``a b^T``.

    ``a`` and ``b`` are unit quaternions or :class:`Se3` values. Evaluated
    through the relative quaternion, which equals
    ``arccos((tr(Ra Rb^T) - 1) / 2)`` but keeps precision near 0 and 180.
    """
    qa = a.rotation if isinstance(a, Se3) else quat_normalize(a)
    qb = b.rotation if isinstance(b, Se3) else quat_normalize(b)
    rel = quat_multiply(qa, quat_conjugate(qb))
    angle = 2.0 * np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0]))
    return float(np.degrees(angle))


# ---------------------------------------------------------------------------
# camera model

INTRINSIC_NAMES = ("fx", "fy", "cx", "cy", "k1", "k2")


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with two radial distortion coefficients."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        problems = []
        if not (self.fx > 0 and self.fy > 0):
            problems.append(f"focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if not (0 < self.cx < self.width):
            problems.append(f"cx={self.cx} outside (0, {self.width})")
        if not (0 < self.cy < self.height):
            problems.append(f"cy={self.cy} outside (0, {self.height})")
        if not problems:
            # Distorted radius of the farthest image corner. The radial map
            # r -> r (1 + k1 r^2 + k2 r^4) must stay positive and increasing
            # until it passes that radius, or corner pixels have no preimage.
            corners = np.array([[0, 0], [self.width, 0], [0, self.height], [self.width, self.height]], float)
            xn = (corners[:, 0] - self.cx) / self.fx
            yn = (corners[:, 1] - self.cy) / self.fy
            rd_max = 1.05 * float(np.sqrt(np.max(xn**2 + yn**2)))
            r = np.linspace(0.0, 4.0 * rd_max, 2048)
            r2 = r * r
            factor = 1.0 + self.k1 * r2 + self.k2 * r2**2
            slope = 1.0 + 3.0 * self.k1 * r2 + 5.0 * self.k2 * r2**2
            bad = (factor <= 0) | (slope <= 0)
            end = int(np.argmax(bad)) if bad.any() else len(r)
            if end == 0 or np.max(r[:end] * factor[:end]) < rd_max:
                problems.append("radial distortion is not invertible over the image")
        if problems:
            raise InvalidIntrinsics("; ".join(problems))

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.k1, self.k2], dtype=float)

    @classmethod
    def from_array(cls, arr, width: int, height: int) -> CameraIntrinsics:
        fx, fy, cx, cy, k1, k2 = (float(v) for v in np.asarray(arr, dtype=float).reshape(6))
        return cls(fx, fy, cx, cy, k1, k2, int(width), int(height))

    @property
    def size(self):
        return (self.width, self.height)

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def project_jacobians(points, params):
    """Project camera-frame points with Jacobians; never raises.

    ``params`` is ``[fx, fy, cx, cy, k1, k2]``. Returns ``(uv, J_point,
    J_params, depth)`` with shapes ``(N,2)``, ``(N,2,3)``, ``(N,2,6)``, ``(N,)``.
    Points with non-positive depth yield NaN rows.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    fx, fy, cx, cy, k1, k2 = np.asarray(params, dtype=float)
    X, Y, Z = P[:, 0], P[:, 1], P[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        iz = np.where(Z > 0, 1.0 / Z, np.nan)
    x = X * iz
    y = Y * iz
    r2 = x * x + y * y
    d = 1.0 + k1 * r2 + k2 * r2 * r2
    dd = k1 + 2.0 * k2 * r2  # d(d)/d(r2)
    uv = np.stack([fx * x * d + cx, fy * y * d + cy], axis=-1)

    n = P.shape[0]
    # d(u,v)/d(x,y)
    Jn = np.empty((n, 2, 2))
    Jn[:, 0, 0] = fx * (d + 2.0 * x * x * dd)
    Jn[:, 0, 1] = fx * 2.0 * x * y * dd
    Jn[:, 1, 0] = fy * 2.0 * x * y * dd
    Jn[:, 1, 1] = fy * (d + 2.0 * y * y * dd)
    # d(x,y)/dP
    Jxy = np.zeros((n, 2, 3))
    Jxy[:, 0, 0] = iz
    Jxy[:, 0, 2] = -x * iz
    Jxy[:, 1, 1] = iz
    Jxy[:, 1, 2] = -y * iz
    Jp = Jn @ Jxy

    Jd = np.zeros((n, 2, 6))
    Jd[:, 0, 0] = x * d
    Jd[:, 1, 1] = y * d
    Jd[:, 0, 2] = 1.0
    Jd[:, 1, 3] = 1.0
    Jd[:, 0, 4] = fx * x * r2
    Jd[:, 1, 4] = fy * y * r2
    Jd[:, 0, 5] = fx * x * r2 * r2
    Jd[:, 1, 5] = fy * y * r2 * r2
    return uv, Jp, Jd, Z


def project(p, D: CameraIntrinsics):
    """Pixel coordinates of camera-frame point(s) ``p``.

    Accepts a single 3-vector or an ``(N, 3)`` array. Pixels outside the
    image are returned as-is.
    """
    P = np.asarray(p, dtype=float)
    single = P.ndim == 1
    P2 = np.atleast_2d(P)
    if np.any(P2[:, 2] <= 0):
        bad = int(np.argmax(P2[:, 2] <= 0))
        raise NonPositiveDepth(f"point {P2[bad].tolist()} has non-positive depth")
    uv = project_jacobians(P2, D.as_array())[0]
    return uv[0] if single else uv


def distort_normalized(xy, k1, k2):
    xy = np.asarray(xy, dtype=float)
    r2 = np.sum(xy * xy, axis=-1, keepdims=True)
    return xy * (1.0 + k1 * r2 + k2 * r2 * r2)


def undistort_normalized(xyd, k1, k2, max_iterations: int = 50, tol: float = 1e-12):
    """Invert the radial model by damped Newton, starting at the distorted coordinates."""
    target = np.atleast_2d(np.asarray(xyd, dtype=float))
    xy = target.copy()
    if k1 == 0.0 and k2 == 0.0:
        return xy

    def residual(v, tgt):
        return distort_normalized(v, k1, k2) - tgt

    F = residual(xy, target)
    err = np.max(np.abs(F), axis=-1)
    active = err > tol
    for _ in range(max_iterations):
        if not np.any(active):
            break
        v = xy[active]
        f = F[active]
        tgt = target[active]
        x, y = v[:, 0], v[:, 1]
        r2 = x * x + y * y
        d = 1.0 + k1 * r2 + k2 * r2 * r2
        dd = k1 + 2.0 * k2 * r2
        a = d + 2 * x * x * dd
        b = 2 * x * y * dd
        c = d + 2 * y * y * dd
        det = a * c - b * b
        step = -np.stack([(c * f[:, 0] - b * f[:, 1]) / det, (a * f[:, 1] - b * f[:, 0]) / det], axis=-1)
        cur = np.max(np.abs(f), axis=-1)
        scale = np.ones(len(v))
        cand = v + step
        fc = residual(cand, tgt)
        for _ in range(8):
            worse = np.max(np.abs(fc), axis=-1) > cur
            worse &= np.isfinite(cur)
            if not np.any(worse):
                break
            scale[worse] *= 0.5
            cand[worse] = v[worse] + scale[worse, None] * step[worse]
            fc[worse] = residual(cand[worse], tgt[worse])
        xy[active] = cand
        F[active] = fc
        err[active] = np.max(np.abs(fc), axis=-1)
        active = ~(err <= tol)
    if np.any(active):
        bad = int(np.flatnonzero(active)[0])
        raise UndistortDivergence(
            f"undistortion did not converge for normalized point {target[bad].tolist()}", pixel=bad
        )
    return xy


def unproject(x, D: CameraIntrinsics):
    """Unit bearing vector(s) in the camera frame for pixel(s) ``x``."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X2 = np.atleast_2d(X)
    xyd = np.stack([(X2[:, 0] - D.cx) / D.fx, (X2[:, 1] - D.cy) / D.fy], axis=-1)
    try:
        xy = undistort_normalized(xyd, D.k1, D.k2)
    except UndistortDivergence as exc:
        idx = exc.pixel
        raise UndistortDivergence(f"undistortion diverged at pixel {X2[idx].tolist()}", pixel=X2[idx]) from None
    f = np.concatenate([xy, np.ones((len(xy), 1))], axis=-1)
    f /= np.linalg.norm(f, axis=-1, keepdims=True)
    return f[0] if single else f
