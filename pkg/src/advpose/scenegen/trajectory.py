from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .. import geometry as geo


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class PoseLabel:
    """Target pose in the chaser camera frame: position (m) and unit quaternion (w, x, y, z)."""

    position: np.ndarray
    quaternion: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "quaternion", geo.quat_normalize(np.asarray(self.quaternion, dtype=np.float64).reshape(4)))

    def to_vector(self) -> np.ndarray:
        """``(x, y, z, w, xi, yj, zk)``."""
        return np.concatenate([self.position, self.quaternion])

    @classmethod
    def from_vector(cls, v) -> "PoseLabel":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:7])

    def __eq__(self, other):
        return isinstance(other, PoseLabel) and np.array_equal(self.to_vector(), other.to_vector())


@dataclass(frozen=True)
class TrajectorySpec:
    """Parametric description of one approach sequence.

    Positions are the target's position in the camera frame.  ``z`` moves from
    ``start_position[2]`` to ``end_position[2]``: evenly over ``frame_count``
    frames, or at ``z_rate`` metres per frame (held at the end once reached).
    Lateral offsets follow the same progress parameter, either on the straight
    chord (``linear``) or with a parabolic bulge of ``arc_height`` peaking
    mid-way (``projectile``).
    """

    start_position: tuple = (0.0, 0.0, 60.0)
    end_position: tuple = (0.0, 0.0, 10.0)
    frame_count: int = 2500
    rotation_policy: str = "fixed"
    rotation_bound_deg: float = 0.0
    lateral_profile: str = "linear"
    z_rate: Optional[float] = None
    arc_height: Optional[tuple] = None
    seed: int = 0
    sequence_id: int = 0

    def __post_init__(self):
        if self.frame_count < 2:
            raise TrajectoryError(f"frame_count must be at least 2, got {self.frame_count}")
        if self.rotation_policy not in ("fixed", "uniform"):
            raise TrajectoryError(f"unknown rotation policy {self.rotation_policy!r}")
        if self.lateral_profile not in ("linear", "projectile"):
            raise TrajectoryError(f"unknown lateral profile {self.lateral_profile!r}")
        if self.start_position[2] < self.end_position[2]:
            raise TrajectoryError("start z must not be closer than end z")
        if self.z_rate is not None and self.z_rate <= 0:
            raise TrajectoryError("z_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start_position"] = list(self.start_position)
        d["end_position"] = list(self.end_position)
        d["arc_height"] = None if self.arc_height is None else list(self.arc_height)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectorySpec":
        d = dict(d)
        for k in ("start_position", "end_position", "arc_height"):
            if d.get(k) is not None:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)


def expand_trajectory(spec: TrajectorySpec) -> list[PoseLabel]:
    n = spec.frame_count
    if n <= 0:
        raise TrajectoryError("zero frame_count")
    start = np.asarray(spec.start_position, dtype=np.float64)
    end = np.asarray(spec.end_position, dtype=np.float64)
    k = np.arange(n)
    if spec.z_rate is None:
        z = start[2] + (end[2] - start[2]) * k / (n - 1)
    else:
        z = np.maximum(start[2] - spec.z_rate * k, end[2])
    span = start[2] - end[2]
    s = (start[2] - z) / span if span > 0 else k / (n - 1)
    xy = start[None, :2] * (1 - s[:, None]) + end[None, :2] * s[:, None]
    if spec.lateral_profile == "projectile":
        bulge = 0.5 * start[:2] if spec.arc_height is None else np.asarray(spec.arc_height, dtype=np.float64)
        xy = xy + 4.0 * (s * (1 - s))[:, None] * bulge[None, :]
    positions = np.column_stack([xy, z])

    if spec.rotation_policy == "uniform" and spec.rotation_bound_deg > 0:
        rng = np.random.default_rng([spec.seed, spec.sequence_id])
        angles = np.radians(rng.uniform(-spec.rotation_bound_deg, spec.rotation_bound_deg, size=(n, 3)))
        quats = [geo.euler_to_quat(*a) for a in angles]
    else:
        quats = [np.array([1.0, 0.0, 0.0, 0.0])] * n
    return [PoseLabel(p, q) for p, q in zip(positions, quats)]


# sequence id, start position, rotation bound (deg) of the thirteen training sequences
TABLE1_SEQUENCES = (
    (0, (0, 0, 60), 0), (1, (-15, -25, 60), 0), (2, (-15, 25, 60), 0), (3, (15, 25, 60), 0), (4, (15, -25, 60), 0),
    (5, (-15, -10, 60), 10), (6, (-15, 10, 60), 10), (7, (15, 10, 60), 10), (8, (15, -10, 60), 10),
    (9, (-15, -10, 60), 10), (10, (-15, 10, 60), 10), (11, (15, 10, 60), 10), (12, (15, -10, 60), 10),
)


def table1_specs(frame_count: int = 2500, seed: int = 0) -> list[TrajectorySpec]:
    """The thirteen approach sequences (5-8 and 9-12 share start points but not rotation draws)."""
    specs = []
    for sid, start, bound in TABLE1_SEQUENCES:
        specs.append(TrajectorySpec(
            start_position=tuple(float(v) for v in start), end_position=(0.0, 0.0, 10.0),
            frame_count=frame_count, rotation_policy="uniform" if bound else "fixed",
            rotation_bound_deg=float(bound), seed=seed, sequence_id=sid))
    return specs


def detection_specs(frame_count: int = 201, z_rate: float = 0.25, seed: int = 0) -> list[TrajectorySpec]:
    """Three projectile approaches from offset start points, target held at identity attitude."""
    starts = [(-15.0, -25.0, 60.0), (15.0, 25.0, 60.0), (15.0, -25.0, 60.0)]
    return [TrajectorySpec(start_position=s, end_position=(0.0, 0.0, 10.0), frame_count=frame_count,
                           lateral_profile="projectile", z_rate=z_rate, seed=seed, sequence_id=100 + i)
            for i, s in enumerate(starts)]
