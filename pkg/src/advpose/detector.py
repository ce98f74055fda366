"""LSTM classifier over SHAP signatures that flags perturbed frames."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numerics import Adadelta, DimensionError, Tape, Tensor, ops

logger = logging.getLogger(__name__)

DETECTOR_VERSION = 1
STD_FLOOR = 1e-8


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    feature_width: int = 256
    sequence_length: int = 9
    hidden: int = 100
    fc_widths: tuple = (64,)
    activation: str = "relu"
    threshold: float = 0.5
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.sequence_length != 9:
            raise DetectorError("signatures have one step per estimator output (9)")
        if self.activation not in ("relu", "tanh"):
            raise DetectorError(f"unknown LSTM activation {self.activation}")
        if not 0.0 <= self.threshold <= 1.0:
            raise DetectorError("threshold must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["fc_widths"] = tuple(d.get("fc_widths", (64,)))
        return cls(**d)


@dataclass
class DetectorWeights:
    config: DetectorConfig
    params: dict
    mean: np.ndarray  # (9, G) input standardisation
    std: np.ndarray
    estimator_fingerprint: str = ""

    def copy(self) -> "DetectorWeights":
        return DetectorWeights(self.config, {k: v.copy() for k, v in self.params.items()},
                               self.mean.copy(), self.std.copy(), self.estimator_fingerprint)

    def save(self, path) -> None:
        meta = {"format_version": DETECTOR_VERSION, "config": self.config.to_dict(),
                "estimator_fingerprint": self.estimator_fingerprint}
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        with open(Path(path), "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                     mean=self.mean, std=self.std, **arrays)

    @classmethod
    def load(cls, path, expect_fingerprint: Optional[str] = None) -> "DetectorWeights":
        with np.load(Path(path)) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
            mean, std = z["mean"], z["std"]
        if meta.get("format_version") != DETECTOR_VERSION:
            raise DetectorError(f"detector format {meta.get('format_version')} unsupported")
        if expect_fingerprint is not None and meta["estimator_fingerprint"] != expect_fingerprint:
            raise DetectorError(f"detector bound to estimator {meta['estimator_fingerprint']}, expected {expect_fingerprint}")
        w = cls(DetectorConfig.from_dict(meta["config"]), params, mean, std, meta["estimator_fingerprint"])
        ref = build_detector(w.config)
        for k, v in ref.params.items():
            if k not in params or params[k].shape != v.shape:
                raise DetectorError(f"detector tensor {k} missing or mis-shaped")
        return w


def build_detector(config: DetectorConfig = DetectorConfig(), estimator_fingerprint: str = "") -> DetectorWeights:
    """Glorot input weights, orthogonal recurrent weights, forget-gate bias 1."""
    rng = np.random.default_rng(config.seed)
    dt = np.dtype(config.dtype)
    g, h = config.feature_width, config.hidden
    lim = np.sqrt(6.0 / (g + 4 * h))
    q, _ = np.linalg.qr(rng.standard_normal((4 * h, h)))
    bias = np.zeros(4 * h)
    bias[h:2 * h] = 1.0
    params = {
        "lstm.w_in": rng.uniform(-lim, lim, (g, 4 * h)),
        "lstm.w_rec": q.T,
        "lstm.bias": bias,
    }
    width = h
    for k, out in enumerate(list(config.fc_widths) + [1]):
        lim = np.sqrt(6.0 / (width + out))
        params[f"fc{k}.weight"] = rng.uniform(-lim, lim, (width, out))
        params[f"fc{k}.bias"] = np.zeros(out)
        width = out
    params = {k: v.astype(dt) for k, v in params.items()}
    return DetectorWeights(config, params, np.zeros((9, g)), np.ones((9, g)), estimator_fingerprint)


def _check_shape(weights: DetectorWeights, signatures: np.ndarray) -> np.ndarray:
    s = np.asarray(signatures)
    if s.ndim == 2:
        s = s[None]
    want = (weights.config.sequence_length, weights.config.feature_width)
    if s.ndim != 3 or s.shape[1:] != want:
        raise DimensionError(f"signature shape {s.shape[1:]} does not match detector input {want}")
    return s


def logits(weights: DetectorWeights, signatures, params: Optional[dict] = None) -> Tensor:
    """N raw scores before the sigmoid; rows are fed to the LSTM in output order."""
    cfg = weights.config
    t = params if params is not None else {k: Tensor(v) for k, v in weights.params.items()}
    if isinstance(signatures, Tensor):
        x = signatures
    else:
        s = _check_shape(weights, signatures)
        x = Tensor(((s - weights.mean) / weights.std).astype(cfg.dtype))
    n = x.shape[0]
    h = Tensor(np.zeros((n, cfg.hidden), dtype=cfg.dtype))
    c = Tensor(np.zeros((n, cfg.hidden), dtype=cfg.dtype))
    for step in range(cfg.sequence_length):
        h, c = ops.lstm_step(x[:, step, :], h, c, t["lstm.w_in"], t["lstm.w_rec"], t["lstm.bias"], cfg.activation)
    y = h
    layers = len(cfg.fc_widths) + 1
    for k in range(layers):
        y = ops.linear(y, t[f"fc{k}.weight"], t[f"fc{k}.bias"])
        if k < layers - 1:
            y = ops.relu(y)
    return ops.reshape(y, (n,))


def scores(weights: DetectorWeights, signatures, batch_size: int = 512) -> np.ndarray:
    s = _check_shape(weights, signatures)
    out = [ops.sigmoid(logits(weights, s[i:i + batch_size])).data for i in range(0, len(s), batch_size)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


@dataclass(frozen=True)
class DetectionRecord:
    frame: int
    attacked: bool
    predicted: bool
    score: float


def detect(weights: DetectorWeights, signature: np.ndarray, frame: int = 0, attacked: bool = False,
           threshold: Optional[float] = None) -> DetectionRecord:
    """Score one 9 x G signature; flagged when ``score >= threshold``."""
    s = np.asarray(signature)
    if s.ndim != 2:
        raise DimensionError(f"detect expects one 9 x G signature, got {s.shape}")
    score = float(scores(weights, s[None])[0])
    thr = weights.config.threshold if threshold is None else threshold
    return DetectionRecord(int(frame), bool(attacked), score >= thr, score)


def detect_batch(weights: DetectorWeights, signatures: np.ndarray, attacked: Sequence[bool],
                 frames: Optional[Sequence[int]] = None) -> list[DetectionRecord]:
    sc = scores(weights, signatures)
    frames = range(len(sc)) if frames is None else frames
    thr = weights.config.threshold
    return [DetectionRecord(int(f), bool(a), bool(s >= thr), float(s)) for f, a, s in zip(frames, attacked, sc)]


def detection_accuracy(records: Sequence[DetectionRecord]) -> float:
    """Percentage of frames whose flag equals the ground truth."""
    if len(records) == 0:
        raise DetectorError("no detection records")
    return 100.0 * sum(r.predicted == r.attacked for r in records) / len(records)


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded permutation cut at exactly round(n * train_fraction)."""
    k = int(round(n * train_fraction))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:k]), np.sort(perm[k:])


@dataclass(frozen=True)
class DetectorTrainConfig:
    max_epochs: int = 200
    batch_size: int = 64
    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-6
    patience: int = 20
    validation_fraction: float = 0.2
    seed: int = 0


@dataclass
class DetectorHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int = 0
    stopped_early: bool = False


def _bce(weights: DetectorWeights, x: np.ndarray, y: np.ndarray) -> float:
    z = np.concatenate([logits(weights, Tensor(x[i:i + 1024])).data for i in range(0, len(x), 1024)])
    z = z.astype(np.float64)
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def train_detector(signatures: np.ndarray, labels: np.ndarray, config: DetectorConfig = DetectorConfig(),
                   train_config: DetectorTrainConfig = DetectorTrainConfig(),
                   estimator_fingerprint: str = "") -> tuple[DetectorWeights, DetectorHistory]:
    """Adadelta on binary cross-entropy with validation-loss early stopping.

    ``signatures``/``labels`` are the training portion; a seeded
    ``validation_fraction`` of them drives early stopping and the weights
    from the best validation epoch are returned.
    """
    labels = np.asarray(labels, dtype=bool)
    s = np.asarray(signatures, dtype=np.float64)
    if len(s) != len(labels):
        raise DetectorError("signatures and labels differ in length")
    if labels.all() or not labels.any():
        raise DetectorError("detector training needs both clean and attacked samples")
    w = build_detector(config, estimator_fingerprint)
    s = _check_shape(w, s)
    tr, va = split_indices(len(s), 1 - train_config.validation_fraction, train_config.seed)
    if len(va) == 0:
        va = tr
    w.mean = s[tr].mean(axis=0)
    w.std = np.maximum(s[tr].std(axis=0), STD_FLOOR)
    x = ((s - w.mean) / w.std).astype(config.dtype)
    y = labels.astype(config.dtype)
    opt = Adadelta(w.params, lr=train_config.lr, rho=train_config.rho, eps=train_config.eps)
    rng = np.random.default_rng([train_config.seed, 2])
    hist = DetectorHistory()
    best, best_loss, waited = w.copy(), np.inf, 0
    for epoch in range(1, train_config.max_epochs + 1):
        perm = tr[rng.permutation(len(tr))]
        total = 0.0
        for b in range(0, len(perm), train_config.batch_size):
            idx = perm[b:b + train_config.batch_size]
            leaves = {k: Tensor(v, requires_grad=True) for k, v in w.params.items()}
            with Tape() as tape:
                loss = ops.bce_with_logits(logits(w, Tensor(x[idx]), leaves), y[idx])
            if not np.isfinite(loss.data):
                raise DetectorError(f"detector loss became non-finite in epoch {epoch}")
            grads = tape.gradient(loss, list(leaves.values()))
            opt.step(dict(zip(leaves.keys(), grads)))
            total += float(loss.data) * len(idx)
        hist.train_loss.append(total / len(tr))
        vl = _bce(w, x[va], y[va].astype(np.float64))
        hist.val_loss.append(vl)
        hist.stop_epoch = epoch
        if vl < best_loss:
            best, best_loss, waited, hist.best_epoch = w.copy(), vl, 0, epoch
        else:
            waited += 1
            if waited >= train_config.patience:
                hist.stopped_early = True
                break
        logger.info("detector epoch %d train %.4f val %.4f", epoch, hist.train_loss[-1], vl)
    return best, hist


def write_detection_report(path, records: Sequence[DetectionRecord], extra: Optional[dict] = None) -> None:
    """Delimited ``frame, truth, prediction, score`` rows (plus constant extra columns)."""
    extra = extra or {}
    with open(Path(path), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["frame", "truth", "prediction", "score", *extra.keys()])
        for r in records:
            wr.writerow([r.frame, int(r.attacked), int(r.predicted), f"{r.score:.6f}", *extra.values()])


def records_digest(records: Sequence[DetectionRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(f"{r.frame},{int(r.attacked)},{int(r.predicted)},{r.score:.6f}\n".encode())
    return h.hexdigest()[:16]
