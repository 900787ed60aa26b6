"""Rigid-body pose utilities.

Conventions used throughout the package:

* A pose maps world points into the camera frame: ``x_cam = R @ x + t``.
* Quaternions are stored ``(qx, qy, qz, qw)`` (scalar last, the scipy order).
* A 6-dof tangent increment is ``delta = (wx, wy, wz, tx, ty, tz)``: axis-angle
  rotation first, translation second.  Increments act by left composition,
  ``apply_increment(delta, pose) == compose(exp(delta), pose)``, so the
  rotation part is expressed in the current camera frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidArgumentError


@dataclass
class Pose:
    """World-to-camera rigid transform (unit quaternion + translation)."""

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(4).copy()
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        norm = float(np.linalg.norm(self.quat))
        if norm < 1e-12:
            raise InvalidArgumentError("quaternion norm is zero")
        self.quat /= norm

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, rot: np.ndarray, translation) -> "Pose":
        q = Rotation.from_matrix(np.asarray(rot, dtype=np.float64)).as_quat()
        return cls(q, translation)

    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_matrix()

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map world points (3,) or (N, 3) into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.translation

    def inverse(self) -> "Pose":
        rot_t = self.rotation_matrix().T
        return Pose.from_matrix(rot_t, -rot_t @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Return the transform applying ``other`` first, then ``self``."""
        r_a = Rotation.from_quat(self.quat)
        r_b = Rotation.from_quat(other.quat)
        quat = (r_a * r_b).as_quat()
        translation = r_a.apply(other.translation) + self.translation
        return Pose(quat, translation)

    def copy(self) -> "Pose":
        return Pose(self.quat, self.translation)

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation_matrix().T @ self.translation


def exp_increment(delta: np.ndarray) -> Pose:
    """Exponential of a 6-dof tangent vector (rotation part via axis-angle)."""
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    quat = Rotation.from_rotvec(delta[:3]).as_quat()
    return Pose(quat, delta[3:])


def apply_increment(delta: np.ndarray, pose: Pose) -> Pose:
    """Left-compose a tangent increment onto ``pose``."""
    return exp_increment(delta).compose(pose)


def relative_pose(prev: Pose, prev_prev: Pose) -> Pose:
    """Transform taking the older camera frame to the newer one."""
    return prev.compose(prev_prev.inverse())


def rotation_angle_deg(a: Pose, b: Pose) -> float:
    """Geodesic angle between the rotation parts, in degrees."""
    rel = Rotation.from_quat(a.quat) * Rotation.from_quat(b.quat).inv()
    return float(np.degrees(rel.magnitude()))


def look_at(camera_center: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> Pose:
    """World-to-camera pose for a camera at ``camera_center`` looking at ``target``.

    Camera axes follow the pinhole convention: +x right, +y down, +z forward.
    """
    center = np.asarray(camera_center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise InvalidArgumentError("camera center coincides with the look-at target")
    forward /= norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    r_norm = np.linalg.norm(right)
    if r_norm < 1e-12:
        # forward parallel to up; pick an arbitrary perpendicular axis
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        r_norm = np.linalg.norm(right)
    right /= r_norm
    down = np.cross(forward, right)
    rot_c2w = np.stack([right, down, forward], axis=1)
    rot = rot_c2w.T
    return Pose.from_matrix(rot, -rot @ center)
