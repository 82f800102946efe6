"""Frozen VGG-16 front end (up to relu3_1), pyramid fusion and feature-space distances."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .imagery import Raster

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
LEVEL_NAMES = ("relu1_1", "relu2_1", "relu3_1")
VGG_WIDTHS = (64, 128, 256)
TORCHVISION_WEIGHTS = "vgg16-397923af.pth"
WEIGHTS_ENV = "SHIFTCD_WEIGHTS_DIR"

# indices into torchvision's vgg16().features
_CONV_IDX = (0, 2, 5, 7, 10)
_TAP_IDX = (1, 6, 11)


class VGGEncoder(nn.Module):
    """``vgg16().features[:12]`` with taps after the first ReLU of each block.

    ``widths`` other than the VGG defaults build a channel-reduced copy used
    for finite-difference checks.
    """

    def __init__(self, widths: tuple[int, int, int] = VGG_WIDTHS):
        super().__init__()
        c1, c2, c3 = widths
        self.widths = tuple(widths)
        self.features = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(c1, c1, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2, 2),
            nn.Conv2d(c1, c2, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(c2, c2, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2, 2),
            nn.Conv2d(c2, c3, 3, padding=1),
            nn.ReLU(),
        )
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.source = "uninitialized"
        self.checksum = ""

    @property
    def out_channels(self) -> int:
        return self.widths[2]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[1] != 3:
            raise DimensionError(f"encoder expects 3 channels, got {x.shape[1]}")
        h = (x - self.mean) / self.std
        levels = []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in _TAP_IDX:
                levels.append(h)
        return levels

    def state_checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in sorted(self.features.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().to(torch.float32).numpy().tobytes())
        return digest.hexdigest()


def _surrogate_init(encoder: VGGEncoder, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for idx in _CONV_IDX:
        conv = encoder.features[idx]
        fan_out = conv.out_channels * conv.kernel_size[0] * conv.kernel_size[1]
        std = (2.0 / fan_out) ** 0.5
        with torch.no_grad():
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
            conv.bias.zero_()


def _default_weight_path() -> Path | None:
    candidates = []
    if os.environ.get(WEIGHTS_ENV):
        candidates.append(Path(os.environ[WEIGHTS_ENV]) / TORCHVISION_WEIGHTS)
    torch_home = os.environ.get("TORCH_HOME", str(Path.home() / ".cache" / "torch"))
    candidates.append(Path(torch_home) / "hub" / "checkpoints" / TORCHVISION_WEIGHTS)
    for path in candidates:
        if path.is_file():
            return path
    return None


def _load_weights(encoder: VGGEncoder, path: Path) -> str:
    if not path.is_file():
        raise ConfigError(f"encoder.weights: {path} does not exist")
    raw = path.read_bytes()
    checksum = hashlib.sha256(raw).hexdigest()
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ConfigError(f"encoder.weights: cannot read {path}: {exc}") from exc
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    wanted = {}
    for idx in _CONV_IDX:
        for part in ("weight", "bias"):
            for key in (f"features.{idx}.{part}", f"{idx}.{part}"):
                if key in state:
                    wanted[f"features.{idx}.{part}"] = state[key]
                    break
            else:
                raise ConfigError(f"encoder.weights: {path} lacks features.{idx}.{part}")
    try:
        encoder.load_state_dict(wanted, strict=False)
    except RuntimeError as exc:
        raise ConfigError(f"encoder.weights: incompatible tensors in {path}: {exc}") from exc
    return checksum


def build_encoder(
    weights: str | os.PathLike | None = None,
    widths: tuple[int, int, int] = VGG_WIDTHS,
    surrogate_seed: int = 0,
) -> VGGEncoder:
    """Construct the frozen encoder.

    An explicit ``weights`` path must exist. Without one, the torchvision file is
    looked up in ``$SHIFTCD_WEIGHTS_DIR`` and the torch hub cache; if neither holds
    it, a seeded He-normal surrogate is used and a warning is logged.
    """
    encoder = VGGEncoder(widths)
    path = Path(weights) if weights else None
    if path is None and tuple(widths) == VGG_WIDTHS:
        path = _default_weight_path()
    if path is not None:
        if tuple(widths) != VGG_WIDTHS:
            raise ConfigError("pretrained weights require the full VGG widths")
        file_sum = _load_weights(encoder, path)
        encoder.source = f"pretrained:{path.name}:{file_sum[:16]}"
    else:
        _surrogate_init(encoder, surrogate_seed)
        encoder.source = f"surrogate:seed={surrogate_seed}"
        if tuple(widths) == VGG_WIDTHS:
            logger.warning(
                "pretrained VGG-16 weights not found (set %s or encoder.weights); "
                "using a seeded random surrogate encoder",
                WEIGHTS_ENV,
            )
    for p in encoder.parameters():
        p.requires_grad_(False)
    encoder.eval()
    encoder.checksum = encoder.state_checksum()
    logger.info("encoder %s sha256=%s", encoder.source, encoder.checksum[:16])
    return encoder


# ---------------------------------------------------------------------------
# Pyramids and distances
# ---------------------------------------------------------------------------


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]
    level_names: tuple[str, ...] = LEVEL_NAMES

    @property
    def finest_size(self) -> tuple[int, int]:
        return tuple(self.levels[0].shape[-2:])


@dataclass
class DeepFeatureVector:
    data: torch.Tensor  # N x C_V x H x W

    @property
    def channels(self) -> int:
        return self.data.shape[1]


def raster_to_tensor(image: Raster | np.ndarray, dtype=torch.float32) -> torch.Tensor:
    data = image.data if isinstance(image, Raster) else np.asarray(image)
    if data.ndim == 2:
        data = data[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(data.transpose(2, 0, 1))).to(dtype)[None]


def tensor_to_array(x: torch.Tensor) -> np.ndarray:
    """1 x C x H x W tensor -> H x W x C float32 array."""
    return x.detach()[0].permute(1, 2, 0).cpu().numpy().astype(np.float32)


def encode(image: Raster | torch.Tensor, encoder: VGGEncoder) -> FeaturePyramid:
    x = image if isinstance(image, torch.Tensor) else raster_to_tensor(image)
    if x.shape[1] != 3:
        raise DimensionError(f"encode expects a 3-channel image, got {x.shape[1]} channels")
    param = next(encoder.parameters())
    with torch.no_grad():
        levels = encoder(x.to(param.dtype))
    return FeaturePyramid(levels)


def fuse_levels(levels: list[torch.Tensor], size: tuple[int, int]) -> torch.Tensor:
    if not levels:
        raise DimensionError("cannot fuse an empty pyramid")
    out = []
    for level in levels:
        if tuple(level.shape[-2:]) != tuple(size):
            level = F.interpolate(level, size=size, mode="bilinear", align_corners=False)
        out.append(level)
    return torch.cat(out, dim=1)


def fuse_pyramid(pyr: FeaturePyramid, target: tuple[int, int] | None = None) -> DeepFeatureVector:
    """Upsample coarser levels bilinearly to ``target`` and concatenate along channels."""
    if not pyr.levels:
        raise DimensionError("cannot fuse an empty pyramid")
    target = tuple(target) if target is not None else pyr.finest_size
    if target != pyr.finest_size:
        raise DimensionError(f"target {target} differs from finest level {pyr.finest_size}")
    return DeepFeatureVector(fuse_levels(pyr.levels, target))


def channel_mean_sq_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(1/C) * sum_c (a_c - b_c)^2 over dim 1."""
    if a.shape != b.shape:
        raise DimensionError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).mean(dim=1)


def difference_map(f1: DeepFeatureVector, f2: DeepFeatureVector) -> np.ndarray:
    """Per-pixel channel-averaged squared distance; returns an H x W array."""
    d = channel_mean_sq_distance(f1.data, f2.data)
    if d.shape[0] != 1:
        raise DimensionError("difference_map expects single-image feature fields")
    return d[0].detach().cpu().numpy()


def deep_features(image: torch.Tensor, encoder: VGGEncoder) -> torch.Tensor:
    """Fused N x C_V x H x W hypervectors for a batch of images."""
    with torch.no_grad():
        levels = encoder(image)
    return fuse_levels(levels, tuple(image.shape[-2:]))


def scene_difference(a: Raster, b: Raster, encoder: VGGEncoder) -> np.ndarray:
    """Feature-space difference map of two single rasters (no tiling)."""
    if a.shape != b.shape:
        raise DimensionError(f"raster shapes differ: {a.shape} vs {b.shape}")
    fa = fuse_pyramid(encode(a, encoder))
    fb = fuse_pyramid(encode(b, encoder))
    return difference_map(fa, fb)
