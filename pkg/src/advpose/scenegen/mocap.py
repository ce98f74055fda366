"""Ground-truth assignment for externally captured frames from a motion-capture export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import geometry as geo
from .trajectory import PoseLabel


class MocapError(ValueError):
    pass


@dataclass(frozen=True)
class MocapRecord:
    t: float
    cam_position: np.ndarray
    cam_quaternion: np.ndarray
    target_position: np.ndarray
    target_quaternion: np.ndarray


def read_mocap_export(path, camera_id: str, target_id: str, delimiter: str = ",") -> list[MocapRecord]:
    """Parse ``t, body id, x, y, z, qw, qx, qy, qz`` rows into per-timestamp records.

    A header row is skipped if its first field is not numeric.  Timestamps
    with only one of the two bodies are dropped.
    """
    bodies: dict[float, dict[str, tuple]] = {}
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh, delimiter=delimiter):
            if not row or not row[0].strip():
                continue
            try:
                t = float(row[0])
            except ValueError:
                continue
            if len(row) < 9:
                raise MocapError(f"mocap row has {len(row)} columns, expected 9: {row}")
            vals = [float(v) for v in row[2:9]]
            bodies.setdefault(t, {})[row[1].strip()] = (np.array(vals[:3]), np.array(vals[3:7]))
    records = []
    for t in sorted(bodies):
        b = bodies[t]
        if camera_id in b and target_id in b:
            records.append(MocapRecord(t, b[camera_id][0], b[camera_id][1], b[target_id][0], b[target_id][1]))
    return records


@dataclass
class MatchResult:
    labels: list
    record_indices: np.ndarray
    gaps: np.ndarray

    @property
    def max_gap(self) -> float:
        return float(self.gaps.max()) if len(self.gaps) else 0.0


def match_mocap(frame_timestamps: Sequence[float], records: Sequence[MocapRecord]) -> MatchResult:
    """Give every frame the nearest-in-time mocap sample.

    Relative position is camera minus target, both in the mocap world frame;
    relative attitude is the target orientation seen from the camera body,
    ``q_cam^-1 ⊗ q_target``.
    """
    if not records:
        raise MocapError("no mocap records")
    ft = np.asarray(frame_timestamps, dtype=np.float64)
    rt = np.array([r.t for r in records])
    if np.any(np.diff(rt) < 0) or np.any(np.diff(ft) < 0):
        raise MocapError("timestamps must be sorted")
    period = float(np.median(np.diff(rt))) if len(rt) > 1 else np.inf
    idx = np.clip(np.searchsorted(rt, ft), 1, len(rt) - 1) if len(rt) > 1 else np.zeros(len(ft), dtype=int)
    if len(rt) > 1:
        left = idx - 1
        idx = np.where(np.abs(ft - rt[left]) <= np.abs(rt[idx] - ft), left, idx)
    gaps = np.abs(rt[idx] - ft)
    limit = 4 * (period / 2)
    bad = np.flatnonzero(gaps > limit)
    if len(bad):
        raise MocapError(f"frame {int(bad[0])} at t={ft[bad[0]]:.6f}s is {gaps[bad[0]]:.6f}s from the nearest mocap sample")
    labels = []
    for i in idx:
        r = records[i]
        pos = r.cam_position - r.target_position
        q = geo.quat_multiply(geo.quat_inverse(geo.quat_normalize(r.cam_quaternion)), geo.quat_normalize(r.target_quaternion))
        labels.append(PoseLabel(pos, q))
    return MatchResult(labels, idx, gaps)
