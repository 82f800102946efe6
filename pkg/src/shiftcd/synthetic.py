"""Deterministic bi-temporal test scene: land-cover mosaic, global style shift, one planted change."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .imagery import Raster

# RGB base colours of the land-cover classes
COVER_COLORS = np.array(
    [
        [0.10, 0.20, 0.35],  # water
        [0.12, 0.32, 0.14],  # forest
        [0.38, 0.55, 0.25],  # grassland
        [0.52, 0.40, 0.26],  # bare soil
        [0.70, 0.62, 0.30],  # cropland
        [0.48, 0.48, 0.50],  # built-up
    ],
    dtype=np.float64,
)
TEXTURE_AMPLITUDE = np.array([0.02, 0.08, 0.05, 0.06, 0.04, 0.10])
CHANGE_COLOR = np.array([0.85, 0.82, 0.78])  # new bright rooftop


@dataclass
class SyntheticPair:
    pre: Raster
    post: Raster
    reference: np.ndarray  # H x W uint8, 1 inside the planted square
    square: tuple[int, int, int]  # (row, col, side)


def _cover_map(rng: np.random.Generator, size: int, n_regions: int) -> np.ndarray:
    seeds = rng.uniform(0, size, size=(n_regions, 2))
    classes = rng.integers(0, len(COVER_COLORS), size=n_regions)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # wobbly boundaries: warp the coordinates with smooth noise before the Voronoi lookup
    warp = [gaussian_filter(rng.normal(size=(size, size)), 12) for _ in range(2)]
    warp = [w / (np.abs(w).max() + 1e-12) * 14.0 for w in warp]
    py, px = yy + warp[0], xx + warp[1]
    d2 = (py[..., None] - seeds[:, 0]) ** 2 + (px[..., None] - seeds[:, 1]) ** 2
    return classes[d2.argmin(axis=-1)]


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    fine = gaussian_filter(rng.normal(size=(size, size)), 1.0)
    coarse = gaussian_filter(rng.normal(size=(size, size)), 4.0)
    tex = fine / fine.std() + 0.7 * coarse / coarse.std()
    return tex / tex.std()


def style_shift(image: np.ndarray) -> np.ndarray:
    """Global acquisition change: channel mixing, gamma, contrast and haze."""
    mix = np.array([[0.80, 0.25, 0.05], [0.10, 0.75, 0.20], [0.05, 0.20, 0.70]])
    out = image @ mix.T
    out = np.clip(out, 0.0, 1.0) ** 0.7
    out = 0.15 + 1.25 * (out - out.mean(axis=(0, 1)))
    out = out + np.array([0.35, 0.30, 0.25])
    return np.clip(out, 0.0, 1.0)


def make_pair(
    size: int = 512, square: int = 64, seed: int = 7, n_regions: int = 28, noise: float = 0.01
) -> SyntheticPair:
    """Pre image, post image (style-shifted, with one planted square) and the change reference."""
    if square < 1 or size - square - 2 * (size // 8) < 1:
        raise ConfigError(f"a {square} px change square does not fit a {size} px scene")
    rng = np.random.default_rng(seed)
    cover = _cover_map(rng, size, n_regions)
    tex = _texture(rng, size)
    base = COVER_COLORS[cover] + (TEXTURE_AMPLITUDE[cover] * tex)[..., None]

    post = base.copy()
    r0 = int(rng.integers(size // 8, size - square - size // 8))
    c0 = int(rng.integers(size // 8, size - square - size // 8))
    patch_tex = _texture(rng, size)[:square, :square]
    post[r0 : r0 + square, c0 : c0 + square] = CHANGE_COLOR + 0.05 * patch_tex[..., None]

    pre = np.clip(base + rng.normal(scale=noise, size=base.shape), 0.0, 1.0)
    post = style_shift(np.clip(post, 0.0, 1.0)) + rng.normal(scale=noise, size=base.shape)
    reference = np.zeros((size, size), dtype=np.uint8)
    reference[r0 : r0 + square, c0 : c0 + square] = 1
    return SyntheticPair(
        pre=Raster(np.clip(pre, 0, 1).astype(np.float32)),
        post=Raster(np.clip(post, 0, 1).astype(np.float32)),
        reference=reference,
        square=(r0, c0, square),
    )
