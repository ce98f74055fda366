from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import fft, ndimage

# JPEG Annex K luminance table
_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61], [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56], [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77], [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101], [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    """Photometric corruption settings; the defaults leave an image unchanged."""

    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    jpeg_quality: Optional[int] = None
    brightness: float = 1.0

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_sigma < 0 or self.brightness < 0:
            raise AugmentError("augmentation magnitudes must be non-negative")
        if self.jpeg_quality is not None and not 1 <= self.jpeg_quality <= 100:
            raise AugmentError("jpeg_quality must lie in [1, 100]")

    @property
    def is_identity(self) -> bool:
        return self == AugmentConfig()


def augment(image: np.ndarray, config: AugmentConfig, seed: int = 0) -> np.ndarray:
    """Apply blur, block-DCT compression, brightness and noise, then clip to [0, 1]."""
    if config.is_identity:
        return image
    rng = np.random.default_rng(seed)
    out = np.asarray(image, dtype=np.float64)
    if config.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(config.blur_sigma, config.blur_sigma, 0), mode="nearest")
    if config.jpeg_quality is not None:
        out = block_dct_quantize(out, config.jpeg_quality)
    if config.brightness != 1.0:
        out = out * config.brightness
    if config.noise_sigma > 0:
        out = out + rng.normal(0.0, config.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def block_dct_quantize(image: np.ndarray, quality: int) -> np.ndarray:
    """Quantise 8x8 DCT blocks of each channel with the JPEG luminance table."""
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    q = np.clip(np.floor((_JPEG_LUMA * scale + 50.0) / 100.0), 1, None) / 255.0
    h, w = image.shape[:2]
    ph, pw = -h % 8, -w % 8
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    H, W, C = padded.shape
    blocks = padded.reshape(H // 8, 8, W // 8, 8, C).transpose(0, 2, 4, 1, 3)
    coef = fft.dctn(blocks - 0.5, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / q) * q
    rec = fft.idctn(coef, axes=(-2, -1), norm="ortho") + 0.5
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(H, W, C)
    return rec[:h, :w]


def sample_augment(limits: AugmentConfig, rng: np.random.Generator) -> AugmentConfig:
    """Draw a concrete per-image setting below ``limits``; each effect fires with probability 1/2."""
    cfg = AugmentConfig()
    if limits.blur_sigma > 0 and rng.random() < 0.5:
        cfg = replace(cfg, blur_sigma=float(rng.uniform(0, limits.blur_sigma)))
    if limits.noise_sigma > 0 and rng.random() < 0.5:
        cfg = replace(cfg, noise_sigma=float(rng.uniform(0, limits.noise_sigma)))
    if limits.jpeg_quality is not None and rng.random() < 0.5:
        cfg = replace(cfg, jpeg_quality=int(rng.integers(limits.jpeg_quality, 101)))
    if limits.brightness != 1.0 and rng.random() < 0.5:
        lo, hi = sorted((1.0 / limits.brightness, limits.brightness))
        cfg = replace(cfg, brightness=float(rng.uniform(lo, hi)))
    return cfg
