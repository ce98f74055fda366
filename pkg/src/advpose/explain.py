"""DeepSHAP attributions of the 9 pose outputs to the GAP features.

Only the head after global average pooling is explained, so a signature is
a 9 x G matrix per frame.  The head is a stack of dense and LeakyReLU
layers; the estimator's own head is a single affine layer, for which the
attribution reduces to ``W[j, i] * (z[j] - mean(background[:, j]))``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .estimator import ModelWeights, predict
from .numerics import DimensionError

SIGNATURE_VERSION = 1
RESCALE_GUARD = 1e-7


class ExplainError(ValueError):
    pass


@dataclass(frozen=True)
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray

    def __call__(self, z):
        return z @ self.weight + self.bias


@dataclass(frozen=True)
class LeakyReLU:
    slope: float = 0.1

    def __call__(self, z):
        return np.where(z > 0, z, self.slope * z)

    def derivative(self, z):
        return np.where(z > 0, 1.0, self.slope)


@dataclass(frozen=True)
class Head:
    layers: tuple

    @classmethod
    def from_weights(cls, weights: ModelWeights) -> "Head":
        w, b = weights.head()
        return cls((Dense(w, b),))

    @property
    def in_features(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def is_affine(self) -> bool:
        return all(isinstance(l, Dense) for l in self.layers)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            z = layer(z)
        return z

    def affine_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Collapse a purely affine head into one (in, out) weight and bias."""
        w = np.eye(self.in_features)
        b = np.zeros(self.in_features)
        for layer in self.layers:
            w, b = w @ layer.weight, b @ layer.weight + layer.bias
        return w, b


@dataclass
class BackgroundSet:
    activations: np.ndarray  # (B, G)
    source_hash: str = ""
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        self.activations = np.atleast_2d(np.asarray(self.activations, dtype=np.float64))
        if len(self.activations) < 1:
            raise ExplainError("background set is empty")
        if not np.all(np.isfinite(self.activations)):
            raise ExplainError("background activations must be finite")

    def __len__(self) -> int:
        return len(self.activations)

    @property
    def width(self) -> int:
        return self.activations.shape[1]

    @property
    def hash(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.activations).tobytes())
        h.update(self.source_hash.encode())
        return h.hexdigest()[:16]


def collect_background(weights: ModelWeights, images: np.ndarray, count: int, seed: int = 0,
                       source_hash: str = "") -> BackgroundSet:
    """GAP activations of ``count`` images drawn without replacement (kept in input order)."""
    n = len(images)
    if n == 0:
        raise ExplainError("no images to draw a background from")
    if not 1 <= count <= n:
        raise ExplainError(f"background count {count} must lie in [1, {n}]")
    idx = np.sort(np.random.default_rng(seed).choice(n, size=count, replace=False))
    _, gap = predict(weights, np.asarray(images)[idx])
    return BackgroundSet(gap, source_hash, idx)


def deeplift_multipliers(head: Head, z: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Rescale-rule multipliers d out_i / d z_j (outputs x features) between ``z`` and one reference."""
    acts, refs = [z], [ref]
    for layer in head.layers:
        acts.append(layer(acts[-1]))
        refs.append(layer(refs[-1]))
    m = np.eye(acts[-1].shape[-1])  # (out, current)
    for k in range(len(head.layers) - 1, -1, -1):
        layer = head.layers[k]
        if isinstance(layer, Dense):
            m = m @ layer.weight.T
        else:
            dx = acts[k] - refs[k]
            dy = acts[k + 1] - refs[k + 1]
            small = np.abs(dx) < RESCALE_GUARD
            ratio = np.where(small, layer.derivative(acts[k]), dy / np.where(small, 1.0, dx))
            m = m * ratio[None, :]
    return m


def shap_values(head: Head, z: np.ndarray, background: BackgroundSet) -> np.ndarray:
    """9 x G attributions of ``head(z)`` averaged over every background row."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != head.in_features:
        raise DimensionError(f"activation of shape {z.shape} does not match head width {head.in_features}")
    if background.width != head.in_features:
        raise DimensionError(f"background width {background.width} != head width {head.in_features}")
    if head.is_affine:
        w, _ = head.affine_matrix()
        return w.T * (z - background.activations.mean(axis=0))[None, :]
    phi = np.zeros((head(z).shape[-1], z.shape[0]))
    for ref in background.activations:
        phi += deeplift_multipliers(head, z, ref) * (z - ref)[None, :]
    return phi / len(background)


@dataclass
class ShapSignature:
    values: np.ndarray  # (9, G)
    frame: str
    model_fingerprint: str
    background_hash: str
    background_size: int

    @property
    def shape(self) -> tuple:
        return self.values.shape


def shap_for_frame(weights: ModelWeights, gap_activation: np.ndarray, background: BackgroundSet,
                   frame: str = "") -> ShapSignature:
    phi = shap_values(Head.from_weights(weights), gap_activation, background)
    return ShapSignature(phi, str(frame), weights.fingerprint, background.hash, len(background))


def shap_batch(weights: ModelWeights, gaps: np.ndarray, background: BackgroundSet) -> np.ndarray:
    """N x 9 x G signatures for the estimator's affine head in one broadcast."""
    gaps = np.atleast_2d(np.asarray(gaps, dtype=np.float64))
    w, _ = weights.head()
    if gaps.shape[1] != w.shape[0] or background.width != w.shape[0]:
        raise DimensionError(f"GAP width {gaps.shape[1]} / background {background.width} != head {w.shape[0]}")
    return w.T[None] * (gaps - background.activations.mean(axis=0))[:, None, :]


def save_signatures(path, values: np.ndarray, frames: Sequence[str], model_fingerprint: str,
                    background_hash: str, background_size: int, labels: Optional[np.ndarray] = None,
                    extra: Optional[dict] = None) -> None:
    """Write N x 9 x G signatures with a JSON header (shape, fingerprint, background hash)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise DimensionError(f"expected N x 9 x G signatures, got {values.shape}")
    header = {
        "format_version": SIGNATURE_VERSION,
        "rows": values.shape[1],
        "width": values.shape[2],
        "count": values.shape[0],
        "model_fingerprint": model_fingerprint,
        "background_hash": background_hash,
        "background_size": int(background_size),
        **(extra or {}),
    }
    arrays = {"values": values, "frames": np.array([str(f) for f in frames])}
    if labels is not None:
        arrays["labels"] = np.asarray(labels)
    with open(Path(path), "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_signatures(path, expect_fingerprint: Optional[str] = None) -> tuple[np.ndarray, dict, dict]:
    """Returns (values, header, other arrays).  Rejects a mismatched model fingerprint."""
    with np.load(Path(path)) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        values = z["values"]
        other = {k: z[k] for k in z.files if k not in ("values", "__header__")}
    if header.get("format_version") != SIGNATURE_VERSION:
        raise ExplainError(f"signature format {header.get('format_version')} unsupported")
    if values.shape != (header["count"], header["rows"], header["width"]):
        raise ExplainError("signature array does not match its header")
    if expect_fingerprint is not None and header["model_fingerprint"] != expect_fingerprint:
        raise ExplainError(f"signatures were made by model {header['model_fingerprint']}, expected {expect_fingerprint}")
    return values, header, other
