"""Scene-level composition: tiled translation, tiled difference map, change extraction."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .change import ChangeResult, FcmConfig, ForestConfig, ThresholdConfig, extract_changes
from .encoder import VGGEncoder, channel_mean_sq_distance, deep_features, raster_to_tensor, tensor_to_array
from .errors import DimensionError
from .imagery import Raster, stitch, tile
from .translator import TranslatorModel, translate_tensors

logger = logging.getLogger(__name__)


def scene_tile_size(shape: tuple[int, ...], tile_size: int) -> int:
    """Largest usable tile: at most ``tile_size`` and the scene, a multiple of 4."""
    size = min(tile_size, shape[0], shape[1])
    size -= size % 4
    if size < 4:
        raise DimensionError(f"scene {shape[:2]} is too small to tile")
    return size


def translate_scene(
    I1: Raster, I2: Raster, model: TranslatorModel, encoder: VGGEncoder, tile_size: int = 256, overlap: float = 0.29
) -> Raster:
    """Translate tile by tile and blend overlaps with the mean reducer."""
    if I1.shape != I2.shape:
        raise DimensionError(f"I1 {I1.shape} and I2 {I2.shape} differ")
    size = scene_tile_size(I1.shape, tile_size)
    t1, grid = tile(I1, size, overlap)
    t2, _ = tile(I2, size, overlap)
    dtype = next(model.parameters()).dtype
    model.eval()
    out = []
    for a, b in zip(t1, t2):
        y = translate_tensors(raster_to_tensor(a, dtype), raster_to_tensor(b, dtype), model, encoder)
        out.append(tensor_to_array(y))
    return Raster(np.clip(stitch(out, grid, "mean"), 0.0, 1.0).astype(np.float32))


def difference_scene(
    A: Raster, B: Raster, encoder: VGGEncoder, tile_size: int = 256, overlap: float = 0.29
) -> np.ndarray:
    """Per-tile deep-feature distance map, stitched with the mean reducer."""
    if A.shape != B.shape:
        raise DimensionError(f"rasters differ: {A.shape} vs {B.shape}")
    size = scene_tile_size(A.shape, tile_size)
    ta, grid = tile(A, size, overlap)
    tb, _ = tile(B, size, overlap)
    dtype = next(encoder.parameters()).dtype
    maps = []
    with torch.no_grad():
        for a, b in zip(ta, tb):
            fa = deep_features(raster_to_tensor(a, dtype), encoder)
            fb = deep_features(raster_to_tensor(b, dtype), encoder)
            maps.append(channel_mean_sq_distance(fa, fb)[0].double().numpy())
    return stitch(maps, grid, "mean")


@dataclass
class Detection:
    translated: Raster
    difference: np.ndarray
    change: ChangeResult


def detect(
    I1: Raster,
    I2: Raster,
    encoder: VGGEncoder,
    model: TranslatorModel | None,
    seed: int = 0,
    tile_size: int = 256,
    overlap: float = 0.29,
    fcm_cfg: FcmConfig = FcmConfig(),
    threshold_cfg: ThresholdConfig = ThresholdConfig(),
    forest_cfg: ForestConfig = ForestConfig(),
) -> Detection:
    """Full detection stage; ``model=None`` compares ``I1`` to ``I2`` without translation."""
    translated = I1 if model is None else translate_scene(I1, I2, model, encoder, tile_size, overlap)
    D = difference_scene(translated, I2, encoder, tile_size, overlap)
    result = extract_changes(D, I1, I2, seed, fcm_cfg, threshold_cfg, forest_cfg)
    return Detection(translated, D, result)
