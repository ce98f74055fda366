"""Rotation representations, pose error metrics, pinhole projection and lab calibration.

Quaternions are Hamilton, scalar-first ``(w, x, y, z)`` arrays, canonicalised
to ``w >= 0``.  The 6-D rotation is the first two columns of the rotation
matrix stacked column-major: ``(a1, a2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class GeometryError(ValueError):
    pass


class DegenerateRotationError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


# ------------------------------------------------------------------ quaternions

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise GeometryError("zero-norm quaternion")
    q = q / n
    return np.where(q[..., :1] < 0, -q, q)


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_inverse(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return quat_conjugate(q) / np.sum(q * q, axis=-1, keepdims=True)


def _hamilton(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    # terms paired so that conj(q) ⊗ q has an exactly zero vector part
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        (w1 * x2 + x1 * w2) + (y1 * z2 - z1 * y2),
        (w1 * y2 + y1 * w2) + (z1 * x2 - x1 * z2),
        (w1 * z2 + z1 * w2) + (x1 * y2 - y1 * x2),
    ], axis=-1)


def quat_multiply(q1, q2) -> np.ndarray:
    """Hamilton product ``q1 ⊗ q2``, normalised to the canonical hemisphere."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    if np.any(np.linalg.norm(q1, axis=-1) < 1e-12) or np.any(np.linalg.norm(q2, axis=-1) < 1e-12):
        raise GeometryError("zero-norm quaternion")
    return quat_normalize(_hamilton(q1, q2))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    r = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return r.reshape(r.shape[:-1] + (3, 3))


def matrix_to_quat(m) -> np.ndarray:
    """Rotation matrix to canonical quaternion (Shepperd's branch selection)."""
    m = np.asarray(m, dtype=np.float64)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, r in enumerate(flat):
        tr = np.trace(r)
        k = int(np.argmax([tr, r[0, 0], r[1, 1], r[2, 2]]))
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + tr)
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif k == 1:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif k == 2:
            s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        out[i] = q
    return quat_normalize(out.reshape(m.shape[:-2] + (4,)))


def axis_angle_to_quat(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return quat_normalize(np.concatenate([[np.cos(angle_rad / 2)], np.sin(angle_rad / 2) * axis]))


def euler_to_quat(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Intrinsic z-y-x (yaw, pitch, roll) angles in radians."""
    qz = axis_angle_to_quat([0, 0, 1], yaw)
    qy = axis_angle_to_quat([0, 1, 0], pitch)
    qx = axis_angle_to_quat([1, 0, 0], roll)
    return quat_multiply(quat_multiply(qz, qy), qx)


# ------------------------------------------------------------------ 6-D representation

def quat_to_6d(q) -> np.ndarray:
    r = quat_to_matrix(q)
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def sixd_to_matrix(r6) -> np.ndarray:
    """Gram-Schmidt the two stored columns into a proper rotation matrix."""
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[..., :3], r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    n2 = np.linalg.norm(a2, axis=-1, keepdims=True)
    if np.any(n1 < 1e-9) or np.any(n2 < 1e-9):
        raise DegenerateRotationError("6-D rotation has a (near) zero column")
    b1 = a1 / n1
    dot = np.sum(b1 * a2, axis=-1, keepdims=True)
    if np.any(np.abs(dot / n2) > 1 - 1e-9):
        raise DegenerateRotationError("6-D rotation columns are parallel")
    b2 = a2 - dot * b1
    b2 = b2 / np.linalg.norm(b2, axis=-1, keepdims=True)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def sixd_to_quat(r6) -> np.ndarray:
    return matrix_to_quat(sixd_to_matrix(r6))


# ------------------------------------------------------------------ metrics

def position_error(p_pred, p_gt) -> np.ndarray | float:
    """Euclidean distance in metres (vectorised over leading axes)."""
    d = np.linalg.norm(np.asarray(p_pred, dtype=np.float64) - np.asarray(p_gt, dtype=np.float64), axis=-1)
    return float(d) if d.ndim == 0 else d


def attitude_error(q_pred, q_gt) -> np.ndarray | float:
    """Geodesic angle in degrees: ``2 acos(|w|)`` of ``q_pred^-1 ⊗ q_gt``.

    Evaluated as ``2 atan2(|v|, |w|)``, the same angle for unit quaternions but
    without acos losing digits near zero error.
    """
    q_pred = quat_normalize(q_pred)
    q_gt = quat_normalize(q_gt)
    d = _hamilton(quat_conjugate(q_pred), q_gt)
    ang = np.degrees(2.0 * np.arctan2(np.linalg.norm(d[..., 1:], axis=-1), np.abs(d[..., 0])))
    return float(ang) if np.ndim(ang) == 0 else ang


# ------------------------------------------------------------------ camera

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, sx: float, sy: float) -> "CameraIntrinsics":
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy)


K_BLENDER = CameraIntrinsics(640.0, 360.0, 240.0, 135.0)
K_ZED = CameraIntrinsics(1400.41, 1400.41, 956.29, 557.258)
# 120x90 desk renders: 62 degree horizontal field of view
K_DESK = CameraIntrinsics(100.0, 100.0, 60.0, 45.0)


def project(K: CameraIntrinsics, point) -> np.ndarray:
    """Pinhole projection of camera-frame point(s) to pixel ``(u, v)``."""
    p = np.asarray(point, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point is on or behind the camera plane")
    u = K.fx * p[..., 0] / z + K.cx
    v = K.fy * p[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


# ------------------------------------------------------------------ lab calibration

# (lab z, representative model z) anchors of the three recorded lab trajectories
LAB_ANCHORS = ((3.122, 51.180), (2.569, 42.11), (2.296, 37.64), (1.748, 28.66), (1.564, 25.64), (1.015, 16.64))


@dataclass(frozen=True)
class LabCalibration:
    """Relates positions measured in the scaled lab to the trained model's frame.

    ``scalar`` overrides the intrinsics-derived constant; the default instance
    uses the value implied by the published lab/model range pairs.
    """

    model_focal: float = K_BLENDER.fx
    model_cx: float = K_BLENDER.cx
    lab_focal: float = K_ZED.fx
    lab_cx: float = K_ZED.cx
    scale_factor: float = 9.0
    image_width_model: float = 480.0
    scalar: Optional[float] = LAB_ANCHORS[0][1] / LAB_ANCHORS[0][0]

    def __post_init__(self):
        vals = [self.model_focal, self.model_cx, self.lab_focal, self.lab_cx, self.scale_factor, self.image_width_model]
        if any(v <= 0 for v in vals) or (self.scalar is not None and self.scalar <= 0):
            raise GeometryError("calibration fields must be positive")

    @classmethod
    def from_intrinsics(cls, model: CameraIntrinsics = K_BLENDER, lab: CameraIntrinsics = K_ZED,
                        scale_factor: float = 9.0, image_width_model: float = 480.0) -> "LabCalibration":
        """Literal focal/principal-point composition, no anchor fit."""
        return cls(model.fx, model.cx, lab.fx, lab.cx, scale_factor, image_width_model, scalar=None)

    @classmethod
    def fit_anchors(cls, anchors=LAB_ANCHORS) -> "LabCalibration":
        """Least-squares scalar through the origin over ``(lab, model)`` pairs."""
        a = np.asarray(anchors, dtype=np.float64)
        return cls(scalar=float((a[:, 0] @ a[:, 1]) / (a[:, 0] @ a[:, 0])))

    @property
    def intrinsic_scalar(self) -> float:
        return self.lab_focal * (self.model_cx / self.lab_cx) * (1.0 / self.scale_factor) * (1.0 / self.model_focal)

    @property
    def c(self) -> float:
        return self.scalar if self.scalar is not None else self.intrinsic_scalar


def lab_to_model_position(pos_lab, calib: LabCalibration = LabCalibration()) -> np.ndarray:
    return calib.c * np.asarray(pos_lab, dtype=np.float64)
