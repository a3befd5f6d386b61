"""Rotation/pose primitives and pinhole projective geometry.

Rotations are stored as unit quaternions ``(w, x, y, z)`` in the canonical
hemisphere ``w >= 0`` and exposed as 3x3 matrices on demand. Poses map
points from their own frame into the parent frame: ``X_parent = R X + t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8
Z_MIN = 1e-6
MIN_PARALLAX_DEG = 0.5


class GeometryError(ValueError):
    pass


class BehindCamera(GeometryError):
    pass


class LowParallax(GeometryError):
    pass


class NegativeDepth(GeometryError):
    pass


# ---------------------------------------------------------------------------
# raw ndarray helpers (used by the hot paths)
# ---------------------------------------------------------------------------

def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method, branch on the largest diagonal term
    m = np.asarray(R, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return _canonical(np.array(q))


def _canonical(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def quat_exp(omega) -> np.ndarray:
    """Rotation vector to (non-canonicalized) unit quaternion."""
    w = np.asarray(omega, dtype=float)
    theta2 = float(w @ w)
    theta = math.sqrt(theta2)
    if theta < SMALL_ANGLE:
        return np.array([1.0 - theta2 / 8.0, *(0.5 * (1.0 - theta2 / 24.0) * w)])
    half = 0.5 * theta
    return np.array([math.cos(half), *(math.sin(half) / theta * w)])


def exp_so3(omega) -> np.ndarray:
    """Rodrigues formula, matrix form."""
    w = np.asarray(omega, dtype=float)
    theta2 = float(w @ w)
    K = skew(w)
    if theta2 < SMALL_ANGLE ** 2:
        return np.eye(3) + K + 0.5 * K @ K
    theta = math.sqrt(theta2)
    return np.eye(3) + (math.sin(theta) / theta) * K + ((1.0 - math.cos(theta)) / theta2) * (K @ K)


def log_so3(R: np.ndarray) -> np.ndarray:
    q = matrix_to_quat(R)
    return quat_log(q)


def quat_log(q: np.ndarray) -> np.ndarray:
    q = q if q[0] >= 0 else -q
    vn = float(np.linalg.norm(q[1:]))
    if vn < SMALL_ANGLE:
        return 2.0 * q[1:] / q[0]
    theta = 2.0 * math.atan2(vn, q[0])
    return theta / vn * q[1:]


def right_jacobian(omega) -> np.ndarray:
    """J_r such that Exp(w + dw) ~= Exp(w) Exp(J_r dw)."""
    w = np.asarray(omega, dtype=float)
    theta2 = float(w @ w)
    K = skew(w)
    if theta2 < 1e-10:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    theta = math.sqrt(theta2)
    return (np.eye(3) - (1.0 - math.cos(theta)) / theta2 * K
            + (theta - math.sin(theta)) / (theta2 * theta) * (K @ K))


def right_jacobian_inv(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float)
    theta2 = float(w @ w)
    K = skew(w)
    if theta2 < 1e-10:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    theta = math.sqrt(theta2)
    coef = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + coef * (K @ K)


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

class Rotation:
    """Unit quaternion rotation, immutable."""

    __slots__ = ("_q", "_R")

    def __init__(self, q=(1.0, 0.0, 0.0, 0.0)):
        self._q = _canonical(np.asarray(q, dtype=float))
        self._q.flags.writeable = False
        self._R = None

    @classmethod
    def identity(cls) -> "Rotation":
        return cls()

    @classmethod
    def from_matrix(cls, R) -> "Rotation":
        return cls(matrix_to_quat(R))

    @classmethod
    def exp(cls, omega) -> "Rotation":
        return cls(quat_exp(omega))

    @property
    def q(self) -> np.ndarray:
        return self._q

    def matrix(self) -> np.ndarray:
        if self._R is None:
            R = quat_to_matrix(self._q)
            R.flags.writeable = False
            self._R = R
        return self._R

    def log(self) -> np.ndarray:
        return quat_log(self._q)

    def inverse(self) -> "Rotation":
        w, x, y, z = self._q
        return Rotation((w, -x, -y, -z))

    def apply(self, v) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=float)

    def __mul__(self, other: "Rotation") -> "Rotation":
        if not isinstance(other, Rotation):
            return NotImplemented
        return Rotation(quat_multiply(self._q, other._q))

    def angle_to(self, other: "Rotation") -> float:
        return float(np.linalg.norm((self.inverse() * other).log()))

    def __repr__(self):
        return f"Rotation(q={np.array2string(self._q, precision=6)})"


def so3_exp(omega) -> Rotation:
    return Rotation.exp(omega)


@dataclass(frozen=True)
class Pose:
    rotation: Rotation = field(default_factory=Rotation)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.flags.writeable = False
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(Rotation.from_matrix(T[:3, :3]), T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix()

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        r_inv = self.rotation.inverse()
        return Pose(r_inv, -(r_inv.matrix() @ self.translation))

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.translation

    def __mul__(self, other: "Pose") -> "Pose":
        if not isinstance(other, Pose):
            return NotImplemented
        return Pose(self.rotation * other.rotation, self.R @ other.translation + self.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def in_image(self, uv) -> np.ndarray:
        uv = np.asarray(uv)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)


# ---------------------------------------------------------------------------
# projective operations
# ---------------------------------------------------------------------------

def project(point_camera, intr: CameraIntrinsics, z_min: float = Z_MIN) -> np.ndarray:
    """Pinhole projection of a camera-frame point to pixels."""
    x, y, z = np.asarray(point_camera, dtype=float)
    if not z > z_min:
        raise BehindCamera(f"point depth {z:g} m is not above z_min={z_min:g}")
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])


def normalize(pixel, intr: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates to the z=1 plane. Works on (..., 2) arrays."""
    p = np.asarray(pixel, dtype=float)
    out = np.empty_like(p)
    out[..., 0] = (p[..., 0] - intr.cx) / intr.fx
    out[..., 1] = (p[..., 1] - intr.cy) / intr.fy
    return out


def denormalize(xy, intr: CameraIntrinsics) -> np.ndarray:
    xy = np.asarray(xy, dtype=float)
    out = np.empty_like(xy)
    out[..., 0] = xy[..., 0] * intr.fx + intr.cx
    out[..., 1] = xy[..., 1] * intr.fy + intr.cy
    return out


def backproject(pixel, depth: float, intr: CameraIntrinsics) -> np.ndarray:
    x, y = normalize(pixel, intr)
    return depth * np.array([x, y, 1.0])


def triangulate_two_view(obs_a, obs_b, pose_b_in_a: Pose,
                         min_parallax_deg: float = MIN_PARALLAX_DEG) -> float:
    """Two-view DLT triangulation; returns inverse depth in frame ``a``.

    ``obs_a``/``obs_b`` are normalized image points and ``pose_b_in_a``
    maps frame-b coordinates into frame a.
    """
    xa = np.array([obs_a[0], obs_a[1], 1.0])
    xb = np.array([obs_b[0], obs_b[1], 1.0])
    R, t = pose_b_in_a.R, pose_b_in_a.translation
    if np.linalg.norm(t) < 1e-12:
        raise LowParallax("zero baseline")
    ray_b = R @ xb
    cos_par = float(xa @ ray_b) / (np.linalg.norm(xa) * np.linalg.norm(ray_b))
    parallax = math.degrees(math.acos(min(1.0, max(-1.0, cos_par))))
    if parallax < min_parallax_deg:
        raise LowParallax(f"parallax {parallax:.3f} deg below {min_parallax_deg} deg")

    P_a = np.hstack([np.eye(3), np.zeros((3, 1))])
    P_b = np.hstack([R.T, -(R.T @ t)[:, None]])
    A = np.vstack([
        xa[0] * P_a[2] - P_a[0],
        xa[1] * P_a[2] - P_a[1],
        xb[0] * P_b[2] - P_b[0],
        xb[1] * P_b[2] - P_b[1],
    ])
    # row-normalize so each view carries equal weight
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    X = np.linalg.svd(A)[2][-1]
    if abs(X[3]) < 1e-15:
        raise LowParallax("point at infinity")
    X = X[:3] / X[3]
    if X[2] <= Z_MIN:
        raise NegativeDepth(f"depth in first view {X[2]:g}")
    depth_b = (R.T @ (X - t))[2]
    if depth_b <= Z_MIN:
        raise NegativeDepth(f"depth in second view {depth_b:g}")
    return 1.0 / X[2]


def essential_from_pose(pose: Pose) -> np.ndarray:
    """``[t]x R`` for the relative pose of frame k+1 expressed in frame k."""
    return skew(pose.translation) @ pose.R
