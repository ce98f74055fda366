"""FGSM perturbations and stochastic burst scheduling along a trajectory."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .estimator import ModelWeights, evaluate, forward, labels_to_targets, loss_total
from .numerics import ParameterError, Tape, Tensor
from .scenegen import FrameSet, PoseLabel


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    attack_probability: float = 0.2
    burst_length: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ParameterError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if not 0.0 <= self.attack_probability <= 1.0:
            raise ParameterError(f"attack_probability must lie in [0, 1], got {self.attack_probability}")
        if self.burst_length < 1:
            raise ParameterError("burst_length must be >= 1")


def _check_epsilon(epsilon: float) -> None:
    if not 0.0 <= epsilon <= 1.0 or not np.isfinite(epsilon):
        raise ParameterError(f"epsilon must lie in (0, 1] (or be exactly 0), got {epsilon}")


def loss_gradient(weights: ModelWeights, images: np.ndarray, positions: np.ndarray,
                  quaternions: np.ndarray) -> np.ndarray:
    """d loss / d image for an NCHW batch, trained sigmas held constant, eval mode."""
    dt = np.dtype(weights.config.dtype)
    x = Tensor(np.asarray(images, dtype=dt), requires_grad=True)
    p_gt, r_gt = labels_to_targets(positions, quaternions)
    with Tape() as tape:
        out, _ = forward(weights, x)
        loss = loss_total(out, p_gt, r_gt, weights.sigma_p, weights.sigma_r)
    return tape.gradient(loss, [x])[0]


def _perturb(x: np.ndarray, grad: np.ndarray, epsilon: float) -> np.ndarray:
    eps = x.dtype.type(epsilon)
    adv = np.clip(x + eps * np.sign(grad).astype(x.dtype), 0, 1)
    # x + eps can round one ulp past the budget; pull such entries back toward x
    over = np.abs(adv - x) > eps
    while np.any(over):
        adv[over] = np.nextafter(adv[over], x[over])
        over = np.abs(adv - x) > eps
    return adv


def fgsm(weights: ModelWeights, image: np.ndarray, label: PoseLabel, epsilon: float) -> np.ndarray:
    """One signed-gradient step of size ``epsilon`` on a CHW image in [0, 1], clipped to [0, 1].

    ``epsilon == 0`` returns an untouched copy without evaluating the model.
    """
    _check_epsilon(epsilon)
    image = np.asarray(image)
    if image.ndim != 3:
        raise ParameterError(f"fgsm expects a single C x H x W image, got {image.shape}")
    if epsilon == 0:
        return image.copy()
    x = image if np.issubdtype(image.dtype, np.floating) else image.astype(np.float64)
    if x.min() < 0 or x.max() > 1:
        raise ParameterError("image values must lie in [0, 1]")
    g = loss_gradient(weights, x[None], np.asarray(label.position)[None], np.asarray(label.quaternion)[None])[0]
    return _perturb(x, g, epsilon)


def fgsm_batch(weights: ModelWeights, images: np.ndarray, positions: np.ndarray, quaternions: np.ndarray,
               epsilon: float, batch_size: int = 32) -> np.ndarray:
    """:func:`fgsm` over an NCHW batch; per-image results equal the single-image call."""
    _check_epsilon(epsilon)
    images = np.asarray(images)
    if epsilon == 0:
        return images.copy()
    out = np.empty_like(images)
    for i in range(0, len(images), batch_size):
        sl = slice(i, i + batch_size)
        g = loss_gradient(weights, images[sl], positions[sl], quaternions[sl])
        out[sl] = _perturb(images[sl], g, epsilon)
    return out


def schedule_attacks(frame_count: int, config: AttackConfig) -> np.ndarray:
    """Boolean per-frame attack mask.

    Every frame not already inside a burst draws a Bernoulli trigger; a
    trigger at frame t marks frames t .. t + burst_length - 1.
    """
    if frame_count < 1:
        raise ParameterError("frame_count must be >= 1")
    rng = np.random.default_rng(config.seed)
    mask = np.zeros(frame_count, dtype=bool)
    t = 0
    while t < frame_count:
        if rng.random() < config.attack_probability:
            mask[t:t + config.burst_length] = True
            t += config.burst_length
        else:
            t += 1
    return mask


def sweep_epsilon(weights: ModelWeights, frames: FrameSet, eps_list: Sequence[float],
                  batch_size: int = 32) -> list[dict]:
    """Mean errors on clean images followed by one row per epsilon."""
    if len(eps_list) == 0:
        raise ParameterError("eps_list is empty")
    for e in eps_list:
        _check_epsilon(e)
    clean = frames.batch(np.arange(len(frames)), dtype=weights.config.dtype)
    rows = [{"epsilon": 0.0, "attacked": False, **evaluate(weights, frames, clean)}]
    for e in eps_list:
        adv = fgsm_batch(weights, clean, frames.positions, frames.quaternions, e, batch_size)
        rows.append({"epsilon": float(e), "attacked": True, **evaluate(weights, frames, adv)})
    return rows


def write_attack_trace(path, mask: np.ndarray, epsilon: float, frame_indices: Optional[Sequence[int]] = None) -> None:
    """Per-frame ``frame, attacked, epsilon`` rows; epsilon is 0 on clean frames."""
    idx = np.arange(len(mask)) if frame_indices is None else np.asarray(frame_indices)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "attacked", "epsilon"])
        for i, m in zip(idx, mask):
            w.writerow([int(i), int(bool(m)), repr(float(epsilon)) if m else "0.0"])


def read_attack_trace(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([int(r["frame"]) for r in rows]), np.array([r["attacked"] == "1" for r in rows]),
            np.array([float(r["epsilon"]) for r in rows]))
