"""Unsupervised affinity prior and the affinity-weighted style image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encoder import VGGEncoder, channel_mean_sq_distance, deep_features
from .errors import ConfigError, DimensionError
from .imagery import Raster


@dataclass
class AffinityMap:
    alpha: np.ndarray  # H x W in [0, 1]; 1 = likely unchanged
    patch_size: int
    distances: np.ndarray | None = None


def patch_distances(I1: Raster, I2: Raster, k: int, encoder: VGGEncoder, batch: int = 256) -> np.ndarray:
    """Per-pixel feature distances from independent non-overlapping k x k patches."""
    if I1.shape != I2.shape:
        raise DimensionError(f"I1 {I1.shape} and I2 {I2.shape} differ")
    if k <= 0:
        raise ConfigError(f"affinity patch size must be positive, got {k}")
    if k % 4:
        raise ConfigError(f"affinity patch size must be a multiple of 4 (two pooling stages), got {k}")
    h, w, c = I1.shape
    ph, pw = -h % k, -w % k

    def patches(r: Raster) -> torch.Tensor:
        data = np.pad(r.data, ((0, ph), (0, pw), (0, 0)), mode="reflect") if (ph or pw) else r.data
        H, W = data.shape[:2]
        blocks = data.reshape(H // k, k, W // k, k, c).transpose(0, 2, 4, 1, 3)
        return torch.from_numpy(np.ascontiguousarray(blocks.reshape(-1, c, k, k)))

    p, q = patches(I1), patches(I2)
    dtype = next(encoder.parameters()).dtype
    out = []
    for start in range(0, p.shape[0], batch):
        vp = deep_features(p[start : start + batch].to(dtype), encoder)
        vq = deep_features(q[start : start + batch].to(dtype), encoder)
        out.append(channel_mean_sq_distance(vp, vq).to(torch.float64))
    d = torch.cat(out).numpy()
    H, W = h + ph, w + pw
    d = d.reshape(H // k, W // k, k, k).transpose(0, 2, 1, 3).reshape(H, W)
    return d[:h, :w]


def alpha_from_distances(d: np.ndarray) -> np.ndarray:
    """``1 - minmax(d)`` over the whole scene; a zero range yields all ones."""
    lo, hi = float(d.min()), float(d.max())
    if hi <= lo:
        return np.ones(d.shape, dtype=np.float32)
    return (1.0 - (d - lo) / (hi - lo)).astype(np.float32)


def affinity_weight(I1: Raster, I2: Raster, k: int, encoder: VGGEncoder) -> AffinityMap:
    d = patch_distances(I1, I2, k, encoder)
    return AffinityMap(alpha_from_distances(d), k, d)


def weighted_style(I1: Raster, I2: Raster, alpha: AffinityMap | np.ndarray) -> Raster:
    """``alpha * I2 + (1 - alpha) * I1`` with alpha broadcast over channels."""
    a = alpha.alpha if isinstance(alpha, AffinityMap) else np.asarray(alpha)
    if I1.shape != I2.shape or a.shape != I1.shape[:2]:
        raise DimensionError(f"shape mismatch: I1 {I1.shape}, I2 {I2.shape}, alpha {a.shape}")
    a = a.astype(np.float32)[:, :, None]
    blended = a * I2.data + (np.float32(1.0) - a) * I1.data
    return Raster(np.clip(blended, 0.0, 1.0))
