"""Raster container, PNG/GeoTIFF I/O, and overlapping tile/stitch."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image, PngImagePlugin

from .errors import DataIOError, DimensionError, FormatError

logger = logging.getLogger(__name__)

# GeoTIFF tags carried through a load/save round trip.
GEO_TAGS = (33550, 33922, 34264, 34735, 34736, 34737, 42112, 42113)

TIFF_SUFFIXES = {".tif", ".tiff"}


@dataclass
class Raster:
    """H x W x C float32 image with values in [0, 1]."""

    data: np.ndarray
    geo: dict[int, Any] | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise DimensionError(f"raster must be HxWxC with positive sizes, got {data.shape}")
        data = data.astype(np.float32, copy=False)
        if not np.all(np.isfinite(data)):
            raise FormatError("raster contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise FormatError(
                f"raster values must lie in [0, 1], got [{data.min()}, {data.max()}]"
            )
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class TileGrid:
    tile_size: int
    stride: int
    origins: list[tuple[int, int]]
    scene_shape: tuple[int, int]

    def to_json(self) -> str:
        return json.dumps(
            {
                "tile_size": self.tile_size,
                "stride": self.stride,
                "scene_shape": list(self.scene_shape),
                "origins": [list(o) for o in self.origins],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TileGrid":
        obj = json.loads(text)
        return cls(
            tile_size=obj["tile_size"],
            stride=obj["stride"],
            origins=[tuple(o) for o in obj["origins"]],
            scene_shape=tuple(obj["scene_shape"]),
        )


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def _normalize(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / np.float32(255.0)
    if arr.dtype == np.uint16:
        return (arr.astype(np.float64) / 65535.0).astype(np.float32)
    if arr.dtype == bool:
        return arr.astype(np.float32)
    if np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float32)
    raise FormatError(f"unsupported pixel type {arr.dtype}")


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        mode = img.mode
        if mode == "P":
            img = img.convert("RGB")
            mode = "RGB"
        if mode in ("L", "RGB"):
            return np.asarray(img)
        if mode.startswith("I;16"):
            return np.asarray(img).astype(np.uint16)
        if mode == "I":
            # PIL reports 16-bit grayscale PNGs as 32-bit "I"
            arr = np.asarray(img)
            if arr.min() < 0 or arr.max() > 65535:
                raise FormatError(f"{path}: 32-bit integer PNG out of 16-bit range")
            return arr.astype(np.uint16)
        raise FormatError(f"{path}: unsupported channel layout {mode!r}")


def _read_tiff(path: Path) -> tuple[np.ndarray, dict[int, Any] | None]:
    import tifffile

    with tifffile.TiffFile(path) as tif:
        page = tif.pages[0]
        arr = page.asarray()
        geo = {}
        for code in GEO_TAGS:
            tag = page.tags.get(code)
            if tag is not None:
                geo[code] = (int(tag.dtype), tag.count, tag.value)
    if arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[2] not in (1, 3):
        arr = np.moveaxis(arr, 0, -1)
    if arr.ndim == 3 and arr.shape[2] not in (1, 3):
        raise FormatError(f"{path}: unsupported channel layout {arr.shape}")
    return arr, (geo or None)


def load_raster(path: str | os.PathLike) -> Raster:
    """Read a PNG or (Geo)TIFF, normalizing integer data by its bit depth."""
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"cannot read raster: {path} does not exist")
    try:
        if path.suffix.lower() in TIFF_SUFFIXES:
            arr, geo = _read_tiff(path)
        else:
            arr, geo = _read_png(path), None
    except FormatError:
        raise
    except Exception as exc:  # decoder errors vary by backend
        raise DataIOError(f"cannot read raster {path}: {exc}") from exc
    return Raster(_normalize(arr), geo=geo)


def _png_info(meta: dict[str, Any] | None) -> PngImagePlugin.PngInfo | None:
    if not meta:
        return None
    info = PngImagePlugin.PngInfo()
    for key, value in meta.items():
        info.add_text(str(key), str(value))
    return info


def _atomic_path(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.with_name(f".{path.name}.tmp")


def save_raster(
    path: str | os.PathLike,
    raster: Raster | np.ndarray,
    bit_depth: int = 8,
    meta: dict[str, Any] | None = None,
) -> Path:
    """Write a [0,1] raster as 8/16-bit PNG or TIFF (geo tags preserved)."""
    path = Path(path)
    if isinstance(raster, Raster):
        data, geo = raster.data, raster.geo
    else:
        data, geo = np.asarray(raster, dtype=np.float32), None
        if data.ndim == 2:
            data = data[:, :, None]
    if bit_depth == 8:
        out = np.round(np.clip(data, 0, 1) * 255.0).astype(np.uint8)
    elif bit_depth == 16:
        out = np.round(np.clip(data, 0, 1) * 65535.0).astype(np.uint16)
    else:
        raise FormatError(f"unsupported bit depth {bit_depth}")
    if out.shape[2] == 1:
        out = out[:, :, 0]
    tmp = _atomic_path(path)
    if path.suffix.lower() in TIFF_SUFFIXES:
        _write_tiff(tmp, out, geo, meta)
    else:
        if out.ndim == 3 and out.shape[2] not in (3,):
            raise FormatError(f"PNG supports 1 or 3 channels, got {out.shape[2]}")
        if bit_depth == 16 and out.ndim == 3:
            raise FormatError("16-bit PNG output is limited to single-channel rasters")
        img = Image.fromarray(out)
        img.save(tmp, format="PNG", pnginfo=_png_info(meta))
    os.replace(tmp, path)
    return path


def _write_tiff(path: Path, arr: np.ndarray, geo: dict | None, meta: dict | None) -> None:
    import tifffile

    extratags = []
    for code, (dtype, count, value) in sorted((geo or {}).items()):
        extratags.append((code, dtype, count, value, True))
    description = json.dumps(meta, sort_keys=True) if meta else None
    tifffile.imwrite(
        path,
        arr,
        photometric="rgb" if arr.ndim == 3 and arr.shape[2] == 3 else "minisblack",
        extratags=extratags,
        description=description,
        metadata=None,
    )


def save_float_map(path: str | os.PathLike, values: np.ndarray, meta: dict | None = None) -> Path:
    """Single-channel float32 TIFF for continuous maps (affinity, difference)."""
    import tifffile

    path = Path(path)
    tmp = _atomic_path(path)
    tifffile.imwrite(
        tmp,
        np.asarray(values, dtype=np.float32),
        photometric="minisblack",
        description=json.dumps(meta, sort_keys=True) if meta else None,
        metadata=None,
    )
    os.replace(tmp, path)
    return path


def load_float_map(path: str | os.PathLike) -> np.ndarray:
    import tifffile

    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"{path} does not exist")
    return tifffile.imread(path).astype(np.float32)


def save_label_png(
    path: str | os.PathLike,
    labels: np.ndarray,
    palette: dict[int, int],
    meta: dict[str, Any] | None = None,
) -> Path:
    """Write an integer label map as 8-bit grayscale using ``palette`` (label -> gray)."""
    path = Path(path)
    labels = np.asarray(labels)
    out = np.zeros(labels.shape, dtype=np.uint8)
    seen = np.zeros(labels.shape, dtype=bool)
    for label, gray in palette.items():
        hit = labels == label
        out[hit] = gray
        seen |= hit
    if not seen.all():
        raise FormatError(f"label map holds values outside {sorted(palette)}")
    tmp = _atomic_path(path)
    Image.fromarray(out).save(tmp, format="PNG", pnginfo=_png_info(meta))
    os.replace(tmp, path)
    return path


def load_label_png(path: str | os.PathLike, palette: dict[int, int]) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"{path} does not exist")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    out = np.full(arr.shape, -1, dtype=np.int16)
    for label, gray in palette.items():
        out[arr == gray] = label
    if (out < 0).any():
        bad = np.unique(arr[out < 0])[:5]
        raise FormatError(f"{path}: unexpected gray levels {bad.tolist()}")
    return out.astype(np.uint8)


def read_png_text(path: str | os.PathLike) -> dict[str, str]:
    with Image.open(path) as img:
        return dict(getattr(img, "text", {}) or {})


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------


def tile_stride(tile_size: int, overlap_rate: float) -> int:
    return max(1, int(math.floor(tile_size * (1.0 - overlap_rate) + 0.5)))


def _axis_origins(dim: int, tile_size: int, stride: int) -> list[int]:
    origins = list(range(0, dim - tile_size + 1, stride))
    if origins[-1] + tile_size < dim:
        origins.append(dim - tile_size)
    return origins


def make_grid(scene_shape: Sequence[int], tile_size: int, overlap_rate: float) -> TileGrid:
    h, w = int(scene_shape[0]), int(scene_shape[1])
    if tile_size < 1:
        raise DimensionError(f"tile_size must be positive, got {tile_size}")
    if not 0.0 <= overlap_rate < 1.0:
        raise DimensionError(f"overlap_rate must lie in [0, 1), got {overlap_rate}")
    if tile_size > min(h, w):
        raise DimensionError(
            f"tile_size {tile_size} exceeds scene size {h}x{w}; pad or resize first"
        )
    stride = tile_stride(tile_size, overlap_rate)
    rows = _axis_origins(h, tile_size, stride)
    cols = _axis_origins(w, tile_size, stride)
    return TileGrid(tile_size, stride, [(r, c) for r in rows for c in cols], (h, w))


def tile(
    raster: Raster | np.ndarray, tile_size: int, overlap_rate: float
) -> tuple[list[np.ndarray], TileGrid]:
    """Cut a scene into overlapping square tiles; the last tile per axis is clamped to the edge."""
    data = raster.data if isinstance(raster, Raster) else np.asarray(raster)
    grid = make_grid(data.shape[:2], tile_size, overlap_rate)
    tiles = [data[r : r + tile_size, c : c + tile_size].copy() for r, c in grid.origins]
    return tiles, grid


def stitch(tiles: Sequence[np.ndarray], grid: TileGrid, reducer: str = "mean") -> np.ndarray:
    """Reassemble per-tile arrays; overlaps are averaged or majority-voted (ties -> 0)."""
    if len(tiles) != len(grid.origins):
        raise DimensionError(f"expected {len(grid.origins)} tiles, got {len(tiles)}")
    if reducer not in ("mean", "majority"):
        raise ValueError(f"unknown reducer {reducer!r}")
    first = np.asarray(tiles[0])
    h, w = grid.scene_shape
    for t in tiles:
        if np.shape(t) != first.shape:
            raise DimensionError(f"tile shapes differ: {np.shape(t)} vs {first.shape}")
    if first.shape[:2] != (grid.tile_size, grid.tile_size):
        raise DimensionError(
            f"tile shape {first.shape[:2]} does not match grid tile size {grid.tile_size}"
        )
    extra = first.shape[2:]
    count = np.zeros((h, w), dtype=np.int64)
    total = np.zeros((h, w) + extra, dtype=np.float64)
    size = grid.tile_size
    for t, (r, c) in zip(tiles, grid.origins):
        total[r : r + size, c : c + size] += np.asarray(t, dtype=np.float64)
        count[r : r + size, c : c + size] += 1
    if (count == 0).any():
        raise DimensionError("tile grid leaves pixels uncovered")
    cnt = count.reshape(count.shape + (1,) * len(extra))
    if reducer == "mean":
        return (total / cnt).astype(first.dtype if first.dtype.kind == "f" else np.float32)
    return (2 * total > cnt).astype(np.uint8)
