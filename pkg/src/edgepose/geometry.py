"""SE(3) poses, pinhole camera model and projection.

Conventions used everywhere in this package:

* Poses are rigid transforms stored as a unit quaternion (w, x, y, z) plus a
  translation vector in meters. An object pose maps object-frame points into
  the camera frame: ``p_cam = R @ p_obj + t``.
* Pixel coordinates have their origin at the top-left corner of the image,
  +u right, +v down.
* All frames are right-handed. Double precision throughout.

3D points are plain ``(3,)`` float arrays (``Point3``), pixels are ``(2,)``
float arrays (``Pixel2``); batched variants take ``(N, 3)`` / ``(N, 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PointBehindCamera

Point3 = np.ndarray  # shape (3,), meters
Pixel2 = np.ndarray  # shape (2,), pixels

_UNIT_NORM_TOL = 1e-9


def _as_vec(x, n: int) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(n)
    return v


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of two (w, x, y, z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class Pose:
    """Rigid SE(3) transform: unit quaternion (w, x, y, z) + translation (m).

    Immutable value object; the stored arrays are marked read-only so
    instances can be shared freely between threads.
    """

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _as_vec(self.q, 4)
        t = _as_vec(self.t, 3)
        norm = np.linalg.norm(q)
        if norm < 1e-12 or not np.isfinite(norm):
            raise ValueError("quaternion norm must be positive and finite")
        if abs(norm - 1.0) > 1e-12:  # keep already-unit inputs bit-stable
            q = q / norm
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    # --- constructors --------------------------------------------------

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        axis = _as_vec(axis, 3)
        n = np.linalg.norm(axis)
        if n < 1e-15:
            if abs(angle) > 1e-15:
                raise ValueError("zero axis with nonzero angle")
            return Pose(t=translation)
        axis = axis / n
        half = 0.5 * angle
        q = np.concatenate(([math.cos(half)], math.sin(half) * axis))
        return Pose(q=q, t=translation)

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        """Build from a 3x4 or 4x4 homogeneous matrix."""
        m = np.asarray(m, dtype=float)
        return Pose(q=quat_from_matrix(m[:3, :3]), t=m[:3, 3])

    @staticmethod
    def from_rt(r: np.ndarray, t) -> "Pose":
        return Pose(q=quat_from_matrix(r), t=t)

    # --- views ----------------------------------------------------------

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix view of the pose."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.t
        return m

    # --- algebra ---------------------------------------------------------

    def rotation_angle_to(self, other: "Pose") -> float:
        """Angle in radians of the relative rotation between two poses.

        Computed from the relative quaternion via atan2, which stays
        well-conditioned for nearly identical rotations.
        """
        conj = np.array([other.q[0], -other.q[1], -other.q[2], -other.q[3]])
        rel = quat_multiply(self.q, conj)
        return 2.0 * math.atan2(float(np.linalg.norm(rel[1:])), abs(float(rel[0])))

    def translation_distance_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.t - other.t))


def compose(a: Pose, b: Pose) -> Pose:
    """Compose two poses: the result applies ``b`` first, then ``a``."""
    q = quat_multiply(a.q, b.q)
    t = quat_to_matrix(a.q) @ b.t + a.t
    return Pose(q=q, t=t)


def inverse(p: Pose) -> Pose:
    """Inverse transform: compose(p, inverse(p)) is the identity."""
    qc = np.array([p.q[0], -p.q[1], -p.q[2], -p.q[3]])
    t = -(quat_to_matrix(qc) @ p.t)
    return Pose(q=qc, t=t)


def transform_point(p: Pose, pt) -> Point3:
    """Apply the rigid transform to a single 3D point."""
    pt = _as_vec(pt, 3)
    return p.rotation_matrix @ pt + p.t


def transform_points(p: Pose, pts: np.ndarray) -> np.ndarray:
    """Apply the rigid transform to an (N, 3) array of points."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    return pts @ p.rotation_matrix.T + p.t


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters with optional two-term radial distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    @property
    def has_distortion(self) -> bool:
        return self.k1 != 0.0 or self.k2 != 0.0

    def scaled(self, s: float) -> "CameraIntrinsics":
        """Intrinsics after resizing the image by factor ``s``."""
        return CameraIntrinsics(
            fx=self.fx * s, fy=self.fy * s, cx=self.cx * s, cy=self.cy * s,
            width=max(1, int(round(self.width * s))),
            height=max(1, int(round(self.height * s))),
            k1=self.k1, k2=self.k2,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "k1": self.k1, "k2": self.k2,
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(
            fx=float(d["fx"]), fy=float(d["fy"]),
            cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            k1=float(d.get("k1", 0.0)), k2=float(d.get("k2", 0.0)),
        )


MIN_DEPTH = 1e-6  # meters; camera-frame z below this counts as behind the camera


def distort_normalized(xn: np.ndarray, yn: np.ndarray, k: CameraIntrinsics):
    """Apply radial distortion to normalized (pre-focal) coordinates."""
    r2 = xn * xn + yn * yn
    d = 1.0 + k.k1 * r2 + k.k2 * r2 * r2
    return xn * d, yn * d


def project(pt, object_pose: Pose, k: CameraIntrinsics) -> Pixel2:
    """Project a single object-frame point to pixel coordinates.

    Raises:
        PointBehindCamera: camera-frame depth is at or below MIN_DEPTH.
    """
    return project_points(np.asarray(pt, dtype=float).reshape(1, 3), object_pose, k)[0]


def project_points(pts: np.ndarray, object_pose: Pose, k: CameraIntrinsics) -> np.ndarray:
    """Project an (N, 3) array of object-frame points to (N, 2) pixels."""
    cam = transform_points(object_pose, pts)
    z = cam[:, 2]
    if np.any(z <= MIN_DEPTH):
        bad = int(np.argmin(z))
        raise PointBehindCamera(
            f"point {bad} has camera-frame z={z[bad]:.3g} m (<= {MIN_DEPTH})")
    xn = cam[:, 0] / z
    yn = cam[:, 1] / z
    if k.has_distortion:
        xn, yn = distort_normalized(xn, yn, k)
    return np.column_stack([k.cx + k.fx * xn, k.cy + k.fy * yn])


def unproject(pixel, depth: float, k: CameraIntrinsics) -> Point3:
    """Camera-frame point at depth ``z`` that projects to ``pixel``.

    Distortion-free inverse of :func:`project`; use
    :func:`edgepose.pnp.undistort_pixels` first for distorted cameras.
    """
    u, v = _as_vec(pixel, 2)
    if depth <= MIN_DEPTH:
        raise PointBehindCamera(f"depth {depth} m is not in front of the camera")
    xn = (u - k.cx) / k.fx
    yn = (v - k.cy) / k.fy
    return np.array([xn * depth, yn * depth, depth])
