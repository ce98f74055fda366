"""Darknet-style residual CNN regressing position (m) and 6-D attitude."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..numerics import DimensionError, ParameterError, Tensor, ops

WEIGHTS_VERSION = 1
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


class ConfigError(ValueError):
    pass


class FingerprintError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    input_height: int = 90
    input_width: int = 120
    stem_channels: int = 16
    stage_widths: tuple = (32, 64, 128, 256)
    res_blocks: tuple = (1, 1, 1, 1)
    gap_width: int = 256
    leaky_slope: float = 0.1
    dropout: float = 0.2
    stem_kernel: int = 7
    position_prior: tuple = (0.0, 0.0, 35.0)
    dtype: str = "float64"

    def __post_init__(self):
        if self.stem_kernel != 7:
            raise ConfigError("the stem convolution must be 7x7")
        if self.gap_width < 9:
            raise ConfigError("GAP width must be at least 9")
        if len(self.stage_widths) != len(self.res_blocks) or not self.stage_widths:
            raise ConfigError("stage_widths and res_blocks must be non-empty and of equal length")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype}")

    @classmethod
    def paper_parity(cls) -> "EstimatorConfig":
        return cls(input_height=270, input_width=480, stem_channels=32, stage_widths=(64, 128, 256, 512, 1024),
                   res_blocks=(1, 2, 2, 2, 1), gap_width=1000)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["res_blocks"] = list(self.res_blocks)
        d["position_prior"] = list(self.position_prior)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorConfig":
        d = dict(d)
        for k in ("stage_widths", "res_blocks", "position_prior"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _conv_specs(cfg: EstimatorConfig) -> list[tuple]:
    """(name, in, out, kernel, stride) for every conv, in forward order; residual pairs marked by name."""
    specs = [("stem", 3, cfg.stem_channels, 7, 1)]
    cin = cfg.stem_channels
    for s, (width, blocks) in enumerate(zip(cfg.stage_widths, cfg.res_blocks), start=1):
        specs.append((f"stage{s}.down", cin, width, 3, 2))
        for b in range(blocks):
            specs.append((f"stage{s}.res{b}.a", width, width // 2, 1, 1))
            specs.append((f"stage{s}.res{b}.b", width // 2, width, 3, 1))
        cin = width
    specs.append(("gap_conv", cin, cfg.gap_width, 1, 1))
    return specs


@dataclass
class ModelWeights:
    """Named parameter arrays plus batch-norm buffers, bound to a config."""

    config: EstimatorConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint

    @property
    def sigma_p(self) -> float:
        return float(self.params["sigma_p"])

    @property
    def sigma_r(self) -> float:
        return float(self.params["sigma_r"])

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()},
                            {k: v.copy() for k, v in self.buffers.items()})

    def head(self) -> tuple[np.ndarray, np.ndarray]:
        """Affine map from GAP features to the 9 outputs: (G x 9 weight, 9 bias)."""
        w = np.concatenate([self.params["fc_pos.weight"], self.params["fc_rot.weight"]], axis=1)
        b = np.concatenate([self.params["fc_pos.bias"], self.params["fc_rot.bias"]])
        return w.astype(np.float64), b.astype(np.float64)

    def save(self, path) -> None:
        meta = {
            "format_version": WEIGHTS_VERSION,
            "config": self.config.to_dict(),
            "fingerprint": self.fingerprint,
            "shapes": {k: list(v.shape) for k, v in sorted({**self.params, **self.buffers}.items())},
        }
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path, expect: Optional[EstimatorConfig] = None) -> "ModelWeights":
        with np.load(Path(path)) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("format_version") != WEIGHTS_VERSION:
                raise FingerprintError(f"weight format {meta.get('format_version')} unsupported")
            cfg = EstimatorConfig.from_dict(meta["config"])
            if cfg.fingerprint != meta["fingerprint"]:
                raise FingerprintError("stored config does not match stored fingerprint")
            if expect is not None and expect.fingerprint != cfg.fingerprint:
                raise FingerprintError(f"weights fingerprint {cfg.fingerprint} != expected {expect.fingerprint}")
            params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
            buffers = {k[7:]: z[k] for k in z.files if k.startswith("buffer/")}
        w = cls(cfg, params, buffers)
        _check_shapes(w, meta["shapes"])
        return w


def _check_shapes(w: ModelWeights, shapes: dict) -> None:
    ref = build_estimator(w.config, seed=0)
    for name, arr in {**ref.params, **ref.buffers}.items():
        have = w.params.get(name, w.buffers.get(name))
        if have is None or have.shape != arr.shape or list(have.shape) != shapes.get(name):
            raise FingerprintError(f"tensor {name} missing or mis-shaped")


def build_estimator(config: EstimatorConfig = EstimatorConfig(), seed: int = 0) -> ModelWeights:
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    params, buffers = {}, {}
    gain = np.sqrt(2.0 / (1 + config.leaky_slope ** 2))
    for name, cin, cout, k, _ in _conv_specs(config):
        std = gain / np.sqrt(cin * k * k)
        params[f"{name}.weight"] = (rng.standard_normal((cout, cin, k, k)) * std).astype(dt)
        params[f"{name}.gamma"] = np.ones(cout, dt)
        params[f"{name}.beta"] = np.zeros(cout, dt)
        buffers[f"{name}.running_mean"] = np.zeros(cout, dt)
        buffers[f"{name}.running_var"] = np.ones(cout, dt)
    g = config.gap_width
    params["fc_pos.weight"] = (rng.standard_normal((g, 3)) / np.sqrt(g)).astype(dt)
    params["fc_pos.bias"] = np.asarray(config.position_prior, dtype=dt)
    params["fc_rot.weight"] = (rng.standard_normal((g, 6)) * 0.1 / np.sqrt(g)).astype(dt)
    params["fc_rot.bias"] = IDENTITY_6D.astype(dt)
    params["sigma_p"] = np.zeros((), dt)
    params["sigma_r"] = np.zeros((), dt)
    return ModelWeights(config, params, buffers)


def _cbl(x, t: dict, buffers: dict, name: str, stride: int, pad: int, cfg: EstimatorConfig, train: bool,
         momentum: float = 0.9):
    y = ops.conv2d(x, t[f"{name}.weight"], None, stride=stride, padding=pad, layout="NHWC")
    return ops.batch_norm_leaky(y, t[f"{name}.gamma"], t[f"{name}.beta"], buffers[f"{name}.running_mean"],
                                buffers[f"{name}.running_var"], train=train, slope=cfg.leaky_slope,
                                momentum=momentum)


def forward(weights: ModelWeights, x, train: bool = False, rng: Optional[np.random.Generator] = None,
            trainable: bool = False, params: Optional[dict] = None, bn_momentum: float = 0.9):
    """Run the estimator on an NCHW batch in [0, 1].

    Returns ``(output, gap)``: the N x 9 tensor ``[x, y, z, r1..r6]`` and the
    N x G pooled features.  With ``trainable`` the parameters are wrapped as
    gradient leaves (pass ``params`` to reuse existing leaf tensors).  Batch
    norm buffers update in place only in train mode, with ``bn_momentum``
    weighting the old value.
    """
    cfg = weights.config
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=cfg.dtype))
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"estimator expects N x 3 x H x W input, got {x.shape}")
    t = params if params is not None else {k: Tensor(v, requires_grad=trainable) for k, v in weights.params.items()}
    buffers = weights.buffers
    # channels-last internally
    y = _cbl(ops.transpose(x, (0, 2, 3, 1)), t, buffers, "stem", 1, 3, cfg, train, bn_momentum)
    for s, blocks in enumerate(cfg.res_blocks, start=1):
        y = _cbl(y, t, buffers, f"stage{s}.down", 2, 1, cfg, train, bn_momentum)
        for b in range(blocks):
            r = _cbl(y, t, buffers, f"stage{s}.res{b}.a", 1, 0, cfg, train, bn_momentum)
            r = _cbl(r, t, buffers, f"stage{s}.res{b}.b", 1, 1, cfg, train, bn_momentum)
            y = ops.add(y, r)
    y = _cbl(y, t, buffers, "gap_conv", 1, 0, cfg, train, bn_momentum)
    gap = ops.global_avg_pool(y, layout="NHWC")
    z = ops.dropout(gap, cfg.dropout, train=train, rng=rng)
    pos = ops.linear(z, t["fc_pos.weight"], t["fc_pos.bias"])
    rot = ops.linear(z, t["fc_rot.weight"], t["fc_rot.bias"])
    return ops.concat([pos, rot], axis=1), gap


def recalibrate_bn(weights: ModelWeights, images: np.ndarray, batch_size: int = 128, seed: int = 0) -> None:
    """Replace batch-norm running statistics with their average over ``images``.

    Frames are shuffled (seeded) into batches whose statistics are averaged
    with equal weight, in place.  Large batches matter: small ones reproduce
    the noise of the running averages.  Dropout does not touch the
    convolutional trunk, so it is skipped.
    """
    order = np.random.default_rng(seed).permutation(len(images))
    for k in weights.buffers:
        weights.buffers[k][...] = 0
    starts = range(0, len(images), batch_size)
    for n, i in enumerate(starts, start=1):
        x = np.asarray(images[order[i:i + batch_size]], dtype=weights.config.dtype)
        forward(weights, x, train=True, rng=np.random.default_rng(0), bn_momentum=(n - 1) / n)


def predict(weights: ModelWeights, images: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode outputs (N x 9) and GAP features (N x G) for NCHW images."""
    outs, gaps = [], []
    for i in range(0, len(images), batch_size):
        out, gap = forward(weights, images[i:i + batch_size])
        outs.append(out.data)
        gaps.append(gap.data)
    if not outs:
        return np.zeros((0, 9)), np.zeros((0, weights.config.gap_width))
    return np.concatenate(outs).astype(np.float64), np.concatenate(gaps).astype(np.float64)
