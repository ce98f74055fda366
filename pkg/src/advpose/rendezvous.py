"""Closed-loop approach simulation under FGSM bursts, attack matrices and trajectory detection runs.

Positions are the target's position in the camera frame; the chaser closes
in along +z toward ``(0, 0, 10)``.  Each frame the scene is rendered at the
true pose, optionally perturbed, and the pose is estimated; the guidance
command derived from the estimate is applied to the true state.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import geometry as geo
from .attacks import AttackConfig, fgsm_batch, schedule_attacks
from .detector import DetectionRecord, DetectorWeights, detect_batch, detection_accuracy
from .estimator import ModelWeights, predict
from .explain import BackgroundSet, shap_batch
from .scenegen import PoseLabel, SatelliteModel, TrajectorySpec, default_satellite, expand_trajectory, render_frame

TARGET = (0.0, 0.0, 10.0)
START_DISTANCES = (60, 50, 40, 30, 20, 10)
BURST_LENGTHS = (5, 10, 15, 20)


class EpisodeError(RuntimeError):
    def __init__(self, frame: int, cause: Exception):
        super().__init__(f"episode aborted at frame {frame}: {cause}")
        self.frame = frame


def guidance_step(p_est, p_tar=TARGET, max_step: float = 1.0) -> np.ndarray:
    """Per-axis commanded position: one ``max_step`` toward the target while ``diff >= max_step``, else onto it."""
    p_est = np.asarray(p_est, dtype=np.float64)
    p_tar = np.broadcast_to(np.asarray(p_tar, dtype=np.float64), p_est.shape)
    # p_est - diff is p_tar in exact arithmetic; return p_tar itself so arrival tests are exact
    return np.where(p_est - p_tar >= max_step, p_est - max_step, p_tar)


@dataclass(frozen=True)
class GuidanceState:
    target: tuple = TARGET
    tolerance: float = 1.0
    max_step: float = 1.0
    min_range: float = 4.0  # true z at or below this counts as a collision

    def __post_init__(self):
        if self.tolerance <= 0 or self.max_step <= 0:
            raise ValueError("tolerance and max_step must be positive")


@dataclass(frozen=True)
class Scene:
    start: tuple = (0.0, 0.0, 60.0)
    attitude: tuple = (1.0, 0.0, 0.0, 0.0)
    intrinsics: geo.CameraIntrinsics = geo.K_DESK
    size: tuple = (90, 120)
    light_dir: tuple = (0.3, -0.4, -1.0)


@dataclass(frozen=True)
class BurstPlan:
    """Deterministic burst: frames from the first with true z <= start + tolerance, for ``length`` frames."""

    epsilon: float
    start_distance: float
    length: int


@dataclass
class EpisodeResult:
    reached_target: bool
    frames: int
    true_positions: np.ndarray
    estimated_positions: np.ndarray
    attacked: np.ndarray
    termination: str
    detections: list = field(default_factory=list)

    @property
    def attacks_occurred(self) -> bool:
        return bool(self.attacked.any())

    @property
    def attack_success(self) -> Optional[bool]:
        """True when attacks happened and the target was missed; undefined without attacks."""
        return (not self.reached_target) if self.attacks_occurred else None

    @property
    def final_position(self) -> np.ndarray:
        return self.true_positions[-1]


def _image(model: SatelliteModel, scene: Scene, position: np.ndarray, dtype) -> np.ndarray:
    return _image_label(model, scene, PoseLabel(position, np.asarray(scene.attitude, dtype=np.float64)), dtype)


def run_episode(weights: ModelWeights, scene: Scene = Scene(), plan: Optional[BurstPlan] = None,
                attack: Optional[AttackConfig] = None, guidance: GuidanceState = GuidanceState(),
                detector: Optional[DetectorWeights] = None, background: Optional[BackgroundSet] = None,
                max_frames: int = 100, model: Optional[SatelliteModel] = None) -> EpisodeResult:
    """Fly one approach.

    Attacks come either from a deterministic ``plan`` (matrix experiments) or
    a stochastic ``attack`` schedule over ``max_frames``.  The episode ends
    when the commanded position lands on the target on every axis (the
    chaser believes it has arrived), when true z reaches ``min_range``, or
    after ``max_frames``.  ``reached_target`` compares the final true
    position with the target.
    """
    model = model or default_satellite()
    dt = np.dtype(weights.config.dtype)
    target = np.asarray(guidance.target, dtype=np.float64)
    q = geo.quat_normalize(np.asarray(scene.attitude, dtype=np.float64))
    mask = schedule_attacks(max_frames, attack) if attack is not None else np.zeros(max_frames, dtype=bool)
    eps = attack.epsilon if attack is not None else (plan.epsilon if plan is not None else 0.0)
    burst_left, burst_started = 0, False

    p = np.asarray(scene.start, dtype=np.float64)
    trues, ests, flags, records = [], [], [], []
    termination = "max_frames"
    for k in range(max_frames):
        try:
            if plan is not None and not burst_started and p[2] <= plan.start_distance + guidance.tolerance:
                burst_started, burst_left = True, plan.length
            attacked = bool(mask[k]) or burst_left > 0
            burst_left = max(0, burst_left - 1)
            x = _image(model, scene, p, dt)[None]
            if attacked:
                x = fgsm_batch(weights, x, p[None], q[None], eps)
            out, gap = predict(weights, x)
        except Exception as exc:  # renderer/estimator failure
            raise EpisodeError(k, exc) from exc
        p_est = out[0, :3]
        trues.append(p.copy())
        ests.append(p_est)
        flags.append(attacked)
        if detector is not None and background is not None:
            sig = shap_batch(weights, gap, background)
            records.extend(detect_batch(detector, sig, [attacked], [k]))
        commanded = guidance_step(p_est, target, guidance.max_step)
        p = p + (commanded - p_est)
        if np.array_equal(commanded, target):
            termination = "arrived"
            break
        if p[2] <= guidance.min_range:
            termination = "collision"
            break
    reached = termination != "collision" and bool(np.linalg.norm(p - target) <= guidance.tolerance)
    trues.append(p.copy())
    return EpisodeResult(reached, len(flags), np.array(trues), np.array(ests), np.array(flags, dtype=bool),
                         termination, records)


UNTESTED = "untested"


@dataclass
class ExperimentMatrix:
    epsilon: float
    start_distances: tuple = START_DISTANCES
    burst_lengths: tuple = BURST_LENGTHS
    cells: dict = field(default_factory=dict)  # (start, burst) -> "success" | "failure" | "untested"

    def __post_init__(self):
        for s in self.start_distances:
            for b in self.burst_lengths:
                self.cells.setdefault((s, b), UNTESTED)
        if set(self.cells) != {(s, b) for s in self.start_distances for b in self.burst_lengths}:
            raise ValueError("matrix cells do not match the axes")

    @property
    def shape(self) -> tuple:
        return len(self.start_distances), len(self.burst_lengths)

    def tested(self) -> dict:
        return {k: v for k, v in self.cells.items() if v != UNTESTED}

    def success_rate_by_burst(self) -> dict:
        out = {}
        for b in self.burst_lengths:
            vals = [self.cells[(s, b)] for s in self.start_distances if self.cells[(s, b)] != UNTESTED]
            out[b] = float(np.mean([v == "success" for v in vals])) if vals else float("nan")
        return out

    def monotone_in_burst(self) -> bool:
        """Per start distance, no success followed by a failure at a longer tested burst."""
        for s in self.start_distances:
            seen_success = False
            for b in self.burst_lengths:
                v = self.cells[(s, b)]
                if v == "success":
                    seen_success = True
                elif v == "failure" and seen_success:
                    return False
        return True

    def rows(self) -> list[list]:
        return [[self.epsilon, s, b, self.cells[(s, b)]] for s in self.start_distances for b in self.burst_lengths]

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "start_distances": list(self.start_distances),
                "burst_lengths": list(self.burst_lengths),
                "cells": [{"start": s, "burst": b, "outcome": v} for (s, b), v in sorted(self.cells.items(), key=lambda kv: (-kv[0][0], kv[0][1]))]}


def attack_matrix(weights: ModelWeights, epsilon: float, start_distances: Sequence[float] = START_DISTANCES,
                  burst_lengths: Sequence[int] = BURST_LENGTHS, tested: Optional[set] = None,
                  scene: Scene = Scene(), guidance: GuidanceState = GuidanceState(),
                  max_frames: int = 100) -> ExperimentMatrix:
    """One deterministic episode per tested (start, burst) cell; others stay untested."""
    m = ExperimentMatrix(float(epsilon), tuple(start_distances), tuple(burst_lengths))
    for s in start_distances:
        for b in burst_lengths:
            if tested is not None and (s, b) not in tested:
                continue
            res = run_episode(weights, scene, BurstPlan(epsilon, s, b), guidance=guidance, max_frames=max_frames)
            m.cells[(s, b)] = "success" if res.attack_success else "failure"
    return m


def write_matrix_csv(path, matrices: Sequence[ExperimentMatrix]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "start_distance", "burst_length", "outcome"])
        for m in matrices:
            w.writerows(m.rows())


@dataclass
class DetectionRunRow:
    epsilon: float
    trajectory: int
    frames: int
    attacked_frames: int
    accuracy: float


def detection_run(weights: ModelWeights, detector: DetectorWeights, background: BackgroundSet,
                  trajectories: Sequence[TrajectorySpec], eps_list: Sequence[float],
                  attack_probability: float = 0.2, burst_length: int = 5, seed: int = 0,
                  scene: Scene = Scene(), model: Optional[SatelliteModel] = None) -> tuple[list, dict]:
    """Open-loop pass over each trajectory with scheduled FGSM bursts; detector consulted every frame.

    Returns the per-(epsilon, trajectory) rows and the detection records keyed the same way.
    """
    model = model or default_satellite()
    dt = np.dtype(weights.config.dtype)
    rows, all_records = [], {}
    for ti, spec in enumerate(trajectories):
        labels = expand_trajectory(spec)
        clean = np.stack([_image_label(model, scene, lab, dt) for lab in labels])
        pos = np.array([l.position for l in labels])
        quat = np.array([l.quaternion for l in labels])
        for e in eps_list:
            cfg = AttackConfig(e, attack_probability, burst_length, seed=seed * 1000 + ti)
            mask = schedule_attacks(len(labels), cfg)
            x = clean.copy()
            if mask.any():
                x[mask] = fgsm_batch(weights, clean[mask], pos[mask], quat[mask], e)
            _, gap = predict(weights, x)
            recs = detect_batch(detector, shap_batch(weights, gap, background), mask)
            rows.append(DetectionRunRow(float(e), ti, len(labels), int(mask.sum()), detection_accuracy(recs)))
            all_records[(float(e), ti)] = recs
    return rows, all_records


def _image_label(model: SatelliteModel, scene: Scene, label: PoseLabel, dtype) -> np.ndarray:
    # same quantisation path as stored datasets
    img = render_frame(model, label, scene.intrinsics, scene.light_dir, scene.size).image
    return (np.round(img * 255.0) / 255.0).astype(dtype).transpose(2, 0, 1)


def write_detection_table(path, rows: Sequence[DetectionRunRow]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "trajectory", "frames", "attacked_frames", "accuracy"])
        for r in rows:
            w.writerow([r.epsilon, r.trajectory, r.frames, r.attacked_frames, f"{r.accuracy:.4f}"])


def write_episode_trace(path, result: EpisodeResult) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "x", "y", "z", "x_est", "y_est", "z_est", "attacked"])
        for k in range(result.frames):
            t, e = result.true_positions[k], result.estimated_positions[k]
            w.writerow([k, *(f"{v:.6f}" for v in t), *(f"{v:.6f}" for v in e), int(result.attacked[k])])
