from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .. import geometry as geo
from ..numerics import Adam, Tape, Tensor, Triangular2, ops
from ..scenegen import AugmentConfig, FrameSet, PoseLabel, augment, sample_augment
from .model import EstimatorConfig, ModelWeights, build_estimator, forward, predict, recalibrate_bn

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite in epoch {epoch}")
        self.epoch = epoch


class EmptyDatasetError(ValueError):
    pass


def labels_to_targets(positions: np.ndarray, quaternions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(positions, dtype=np.float64), geo.quat_to_6d(quaternions)


def loss_total(pred, p_gt, r_gt, sigma_p, sigma_r) -> Tensor:
    """Uncertainty-weighted sum of batch position and 6-D attitude residual norms.

    ``exp(-2 sp) * sum|p - p_gt| + exp(-2 sr) * sum|r - r_gt| + 2 (sp + sr)``
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    p_res = ops.sub(pred[:, 0:3], np.asarray(p_gt, dtype=pred.dtype))
    r_res = ops.sub(pred[:, 3:9], np.asarray(r_gt, dtype=pred.dtype))
    lp = ops.sum(ops.row_norm(p_res))
    lr = ops.sum(ops.row_norm(r_res))
    return weighted_loss(lp, lr, sigma_p, sigma_r)


def weighted_loss(lp, lr, sigma_p, sigma_r) -> Tensor:
    sp = sigma_p if isinstance(sigma_p, Tensor) else Tensor(sigma_p)
    sr = sigma_r if isinstance(sigma_r, Tensor) else Tensor(sigma_r)
    wp = ops.mul(ops.exp(ops.mul(sp, -2.0)), lp)
    wr = ops.mul(ops.exp(ops.mul(sr, -2.0)), lr)
    return ops.add(ops.add(wp, wr), ops.mul(ops.add(sp, sr), 2.0))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    base_lr: float = 2.5e-5
    max_lr: Optional[float] = None
    step_size_epochs: float = 4.0
    sigma_p_init: float = 0.0
    sigma_r_init: float = 0.0
    augmentation: Optional[AugmentConfig] = None
    eval_every: int = 1
    seed: int = 0
    recalibrate_batch: int = 128  # 0 keeps the running averages from training

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.recalibrate_batch < 0:
            raise ValueError("recalibrate_batch must be >= 0")

    @property
    def schedule(self) -> Triangular2:
        return Triangular2(self.base_lr, self.max_lr if self.max_lr is not None else 10 * self.base_lr,
                           self.step_size_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = None if self.augmentation is None else asdict(self.augmentation)
        return d


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    position_error: float
    attitude_error: float
    sigma_p: float
    sigma_r: float


def _augment_batch(images: np.ndarray, limits: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(images)
    for i, img in enumerate(images):
        cfg = sample_augment(limits, rng)
        out[i] = augment(img.transpose(1, 2, 0), cfg, seed=int(rng.integers(2 ** 31))).transpose(2, 0, 1)
    return out


def train(frames: FrameSet, config: TrainConfig, estimator: EstimatorConfig = EstimatorConfig(),
          weights: Optional[ModelWeights] = None) -> tuple[ModelWeights, list[EpochRecord]]:
    """Fit the estimator with Adam under a triangular2 cyclical learning rate.

    History row 0 is the untrained model; rows 1..epochs follow each epoch.
    Errors are eval-mode means over ``frames``.
    """
    if len(frames) == 0:
        raise EmptyDatasetError("training split is empty")
    w = weights.copy() if weights is not None else build_estimator(estimator, seed=config.seed)
    w.params["sigma_p"][...] = config.sigma_p_init
    w.params["sigma_r"][...] = config.sigma_r_init
    dt = np.dtype(w.config.dtype)
    rng = np.random.default_rng([config.seed, 1])
    p_all, r_all = labels_to_targets(frames.positions, frames.quaternions)
    opt = Adam(w.params, lr=config.base_lr)
    sched = config.schedule
    n = len(frames)
    steps = int(np.ceil(n / config.batch_size))

    history = [_record(0, 0.0, float("nan"), w, frames)]
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for b in range(steps):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            x = frames.batch(idx, dtype=dt)
            if config.augmentation is not None:
                x = _augment_batch(x, config.augmentation, rng).astype(dt)
            opt.lr = sched((epoch - 1) + b / steps)
            leaves = {k: Tensor(v, requires_grad=True) for k, v in w.params.items()}
            with Tape() as tape:
                out, _ = forward(w, x, train=True, rng=rng, params=leaves)
                loss = loss_total(out, p_all[idx], r_all[idx], leaves["sigma_p"], leaves["sigma_r"])
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(epoch)
            grads = tape.gradient(loss, list(leaves.values()))
            opt.step(dict(zip(leaves.keys(), grads)))
            total += float(loss.data)
        if epoch == config.epochs and config.recalibrate_batch:
            recalibrate_bn(w, frames.batch(np.arange(n), dtype=dt), config.recalibrate_batch, seed=config.seed)
        if config.eval_every and (epoch % config.eval_every == 0 or epoch == config.epochs):
            rec = _record(epoch, opt.lr, total / n, w, frames)
        else:
            rec = EpochRecord(epoch, opt.lr, total / n, float("nan"), float("nan"), w.sigma_p, w.sigma_r)
        history.append(rec)
        logger.info("epoch %d loss %.4f pos %.3f m att %.3f deg", epoch, rec.loss, rec.position_error, rec.attitude_error)
    return w, history


def _record(epoch: int, lr: float, loss: float, w: ModelWeights, frames: FrameSet) -> EpochRecord:
    m = evaluate(w, frames)
    return EpochRecord(epoch, lr, loss, m["position_error"], m["attitude_error"], w.sigma_p, w.sigma_r)


def outputs_to_pose(out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split N x 9 outputs into positions, quaternions and a degenerate-attitude flag."""
    out = np.asarray(out, dtype=np.float64)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (len(out), 1))
    degenerate = np.zeros(len(out), dtype=bool)
    for i, r6 in enumerate(out[:, 3:9]):
        try:
            quats[i] = geo.sixd_to_quat(r6)
        except geo.DegenerateRotationError:
            degenerate[i] = True
    return out[:, :3], quats, degenerate


def pose_errors(out: np.ndarray, positions: np.ndarray, quaternions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame position (m) and attitude (deg) errors; degenerate attitudes count as 180 deg."""
    p, q, bad = outputs_to_pose(out)
    pe = np.atleast_1d(geo.position_error(p, positions))
    ae = np.atleast_1d(geo.attitude_error(q, quaternions))
    ae = np.where(bad, 180.0, ae)
    return pe, ae


def evaluate(weights: ModelWeights, frames: FrameSet, images: Optional[np.ndarray] = None) -> dict:
    """Mean position and attitude error over ``frames`` (optionally on substitute ``images``)."""
    if len(frames) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    x = images if images is not None else frames.batch(np.arange(len(frames)), dtype=weights.config.dtype)
    out, _ = predict(weights, x)
    pe, ae = pose_errors(out, frames.positions, frames.quaternions)
    return {"position_error": float(pe.mean()), "attitude_error": float(ae.mean())}


def estimate_pose(weights: ModelWeights, image_chw: np.ndarray) -> tuple[PoseLabel, np.ndarray, np.ndarray]:
    """Single-image inference: (pose, raw 9-vector, GAP features)."""
    out, gap = predict(weights, image_chw[None].astype(weights.config.dtype))
    p, q, _ = outputs_to_pose(out)
    return PoseLabel(p[0], q[0]), out[0], gap[0]
