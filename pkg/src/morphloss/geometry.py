"""Quaternion algebra, rigid camera poses, and pinhole projection.

Conventions used throughout the package:

* quaternions are Hamilton, scalar-first (w, x, y, z);
* world units are centimeters;
* a pose [R | t] maps world points to camera coordinates, cam = R p + t;
* the camera looks along -z of its own frame, so visible points have
  negative camera-frame z and the projective divide keeps the sign of w'.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MorphlossError

UNIT_QUAT_TOL = 1e-9
PROJECTION_W_TOL = 1e-9


class DegenerateQuaternion(MorphlossError):
    """Raw quaternion too close to zero to normalize."""


class NotNormalized(MorphlossError):
    """A unit quaternion was required but not provided."""


class BehindImagePlane(MorphlossError):
    """A point landed on (or numerically at) the image plane, w' ~ 0."""

    def __init__(self, index: int, w: float):
        self.index = index
        self.w = w
        super().__init__(f"point {index} has |w'| = {abs(w):.3e} <= {PROJECTION_W_TOL}")


@dataclass(frozen=True)
class Quaternion:
    """Scalar-first quaternion. Unit-ness is checked where required, not here."""

    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=float)

    @staticmethod
    def from_array(a) -> "Quaternion":
        a = np.asarray(a, dtype=float)
        if a.shape != (4,):
            raise ValueError(f"expected 4-vector, got shape {a.shape}")
        return Quaternion(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @property
    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def is_unit(self, tol: float = UNIT_QUAT_TOL) -> bool:
        return abs(self.w**2 + self.x**2 + self.y**2 + self.z**2 - 1.0) <= tol

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.w, -self.x, -self.y, -self.z)


@dataclass(frozen=True)
class Shape:
    """Ordered 3D point set; index n always denotes the same semantic vertex."""

    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"expected (N, 3) points with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("shape contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def flat(self) -> np.ndarray:
        """Row-major flattening [p0x, p0y, p0z, p1x, ...]."""
        return self.points.reshape(-1)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def homogeneous(self) -> np.ndarray:
        """(N, 4) lift with unit last coordinate."""
        return np.hstack([self.points, np.ones((self.n_points, 1))])


@dataclass(frozen=True)
class Calibration:
    """Pinhole intrinsics, pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 224
    height: int = 224

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def default_calibration() -> Calibration:
    """224x224 image, f = 500 px: the mean face spans about half the image
    when placed at t = (0, 0, -60)."""
    return Calibration(fx=500.0, fy=500.0, cx=112.0, cy=112.0, width=224, height=224)


@dataclass(frozen=True)
class CameraPose:
    """Extrinsic rotation (unit quaternion) + translation, cam = R p + t."""

    q: Quaternion
    t: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.q.is_unit():
            raise NotNormalized(f"pose quaternion has norm {self.q.norm:.12f}")
        t = np.array(self.t, dtype=float)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValueError("translation must be a finite 3-vector")
        t.setflags(write=False)
        object.__setattr__(self, "t", t)

    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.q)

    def matrix(self) -> np.ndarray:
        """3x4 extrinsic [R | t]."""
        return np.hstack([self.rotation(), self.t.reshape(3, 1)])

    def matrix_h(self) -> np.ndarray:
        """4x4 homogeneous extrinsic."""
        out = np.eye(4)
        out[:3, :3] = self.rotation()
        out[:3, 3] = self.t
        return out


def identity_pose(t=(0.0, 0.0, 0.0)) -> CameraPose:
    return CameraPose(Quaternion(1.0, 0.0, 0.0, 0.0), np.asarray(t, dtype=float))


def quat_normalize(raw) -> tuple[Quaternion, np.ndarray]:
    """Normalize a raw 4-vector onto the unit sphere.

    Returns the unit quaternion and the 4x4 Jacobian of the map
    raw -> raw/||raw||, which is (I - q q^T)/||raw|| at the normalized q.
    """
    raw = np.asarray(raw, dtype=float).reshape(4)
    n = float(np.linalg.norm(raw))
    if n <= 1e-12:
        raise DegenerateQuaternion(f"raw quaternion norm {n:.3e} too small")
    q = raw / n
    jac = (np.eye(4) - np.outer(q, q)) / n
    return Quaternion.from_array(q), jac


def quat_to_rotation(q: Quaternion) -> np.ndarray:
    """Rotation matrix of a unit quaternion (Hamilton convention)."""
    if not q.is_unit():
        raise NotNormalized(f"quaternion has norm {q.norm:.12f}, expected 1")
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_derivatives(q: Quaternion) -> np.ndarray:
    """dR/dq of the formula in quat_to_rotation, components treated as free.

    Shape (4, 3, 3), indexed by (w, x, y, z). Meant to be chained with the
    normalization Jacobian from quat_normalize, which makes the composition
    the exact derivative of raw -> R(raw/||raw||).
    """
    w, x, y, z = q.w, q.x, q.y, q.z
    dw = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=float)
    dx = 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=float)
    dy = 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=float)
    dz = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=float)
    return np.stack([dw, dx, dy, dz])


def pose_apply(pose: CameraPose, shape: Shape) -> Shape:
    """Map every point through [R | t]; point order is preserved."""
    r = pose.rotation()
    return Shape(shape.points @ r.T + pose.t)


def project_camera_points(calib: Calibration, cam: np.ndarray) -> np.ndarray:
    """Projective divide for points already in camera coordinates.

    cam is (N, 3); raises BehindImagePlane (naming the first offending
    index) when any |z| falls at or below the singularity tolerance.
    """
    w = cam[:, 2]
    bad = np.abs(w) <= PROJECTION_W_TOL
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise BehindImagePlane(idx, float(w[idx]))
    u = (calib.fx * cam[:, 0] + calib.cx * w) / w
    v = (calib.fy * cam[:, 1] + calib.cy * w) / w
    return np.column_stack([u, v])


def project(calib: Calibration, pose: CameraPose, shape: Shape) -> np.ndarray:
    """Pinhole projection K [R | t] with projective divide, (N, 2) pixels.

    Points are not clipped to the image bounds.
    """
    cam = shape.points @ pose.rotation().T + pose.t
    return project_camera_points(calib, cam)


def pose_relative(gt: CameraPose, pred: CameraPose) -> np.ndarray:
    """Relative rigid motion [R|t] [R_hat|t_hat]^-1 as a 4x4 matrix.

    Applying it to a predicted, posed shape re-expresses the prediction's
    pose error as an isometric distortion of the shape itself.
    """
    r_gt = gt.rotation()
    r_pred = pred.rotation()
    r_rel = r_gt @ r_pred.T
    t_rel = gt.t - r_rel @ pred.t
    out = np.eye(4)
    out[:3, :3] = r_rel
    out[:3, 3] = t_rel
    return out


def ypr_to_quaternion(yaw_deg: float, pitch_deg: float, roll_deg: float) -> Quaternion:
    """Compose R = Ry(yaw) Rx(pitch) Rz(roll) as a unit quaternion.

    Yaw turns about the y axis, pitch about x, roll about z, matching the
    angle-binning convention used by the evaluation reports.
    """
    a = math.radians(yaw_deg) / 2.0
    b = math.radians(pitch_deg) / 2.0
    c = math.radians(roll_deg) / 2.0
    qy = np.array([math.cos(a), 0.0, math.sin(a), 0.0])
    qx = np.array([math.cos(b), math.sin(b), 0.0, 0.0])
    qz = np.array([math.cos(c), 0.0, 0.0, math.sin(c)])
    return Quaternion.from_array(quat_multiply(qy, quat_multiply(qx, qz)))


def quaternion_to_ypr(q: Quaternion) -> tuple[float, float, float]:
    """Invert ypr_to_quaternion; degrees. Valid away from pitch = +-90."""
    r = quat_to_rotation(q)
    pitch = math.asin(max(-1.0, min(1.0, -r[1, 2])))
    yaw = math.atan2(r[0, 2], r[2, 2])
    roll = math.atan2(r[1, 0], r[1, 1])
    return math.degrees(yaw), math.degrees(pitch), math.degrees(roll)


def quat_multiply(q1, q2) -> np.ndarray:
    """Hamilton product on scalar-first 4-arrays."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )
