"""Light-weight style-bank transformer and mirrored decoder.

The attention block follows the grouped/downsampled construction: queries and
keys are group-normalized, split into channel groups and reduced spatially by
stride-2 convolutions; values are expanded by a style bank generator into
``G * J`` affine matrices per coarse position. Attention aggregates the bank,
the ``J`` variants are reduced, and the resulting affine coefficients modulate
the group-normalized content features.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import VGG_WIDTHS, VGGEncoder, raster_to_tensor, tensor_to_array
from .errors import CompatibilityError, ConfigError, DataIOError, DimensionError, NumericError
from .imagery import Raster

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttentionConfig:
    channels: int = 256
    groups: int = 16
    downsample: int = 4
    variants: int = 8
    reduce: str = "mean"  # "mean" | "index"
    variant_index: int = 0
    modulation: str = "full"  # "full" | "coarse"

    def __post_init__(self):
        if self.groups < 1 or self.variants < 1 or self.channels < 1:
            raise ConfigError("channels, groups and variants must be positive")
        if self.channels % self.groups:
            raise ConfigError(
                f"channels ({self.channels}) must be divisible by groups ({self.groups})"
            )
        m = self.downsample
        if m < 1 or m & (m - 1):
            raise ConfigError(f"downsample factor must be a power of 2, got {m}")
        if self.reduce not in ("mean", "index"):
            raise ConfigError(f"unknown variant reduction {self.reduce!r}")
        if self.modulation not in ("full", "coarse"):
            raise ConfigError(f"unknown modulation {self.modulation!r}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.groups

    @property
    def bank_channels(self) -> int:
        d = self.head_dim
        return self.groups * self.variants * d * (d + 1)

    @property
    def stages(self) -> int:
        return int(math.log2(self.downsample))


def _downsampler(channels: int, groups: int, stages: int) -> nn.Sequential:
    layers = [
        nn.Conv2d(channels, channels, 3, stride=2, padding=1, groups=groups, bias=False)
        for _ in range(stages)
    ]
    return nn.Sequential(*layers) if layers else nn.Sequential(nn.Identity())


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-stochastic ``softmax(q k^T / sqrt(d))``.

    ``q``: (..., Nq, d), ``k``: (..., Nk, d) -> (..., Nq, Nk).
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key widths differ: {q.shape[-1]} vs {k.shape[-1]}")
    if not (torch.isfinite(q).all() and torch.isfinite(k).all()):
        raise NumericError("non-finite query or key")
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1)


@dataclass
class StyleBank:
    """Per coarse position: ``G x J`` matrices of shape d x (d+1); last column is the bias."""

    matrices: torch.Tensor  # N x G x P x J x d x (d+1)
    grid: tuple[int, int]

    @property
    def weights(self) -> torch.Tensor:
        return self.matrices[..., :-1]

    @property
    def bias(self) -> torch.Tensor:
        return self.matrices[..., -1]


class EfficientSelfAttention(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        c, g = cfg.channels, cfg.groups
        self.norm_pre = nn.GroupNorm(g, c)
        self.norm_pos = nn.GroupNorm(g, c)
        self.down_q = _downsampler(c, g, cfg.stages)
        self.down_k = _downsampler(c, g, cfg.stages)
        self.down_v = _downsampler(c, 1, cfg.stages)
        self.sbg = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1, groups=g),
            nn.ReLU(),
            nn.Conv2d(c, cfg.bank_channels, 3, padding=1, groups=g),
        )

    def reset_bank_to_identity(self) -> None:
        """Bias the generator so every bank entry starts as ``W = I, b = 0``."""
        d = self.cfg.head_dim
        eye = torch.cat([torch.eye(d), torch.zeros(d, 1)], dim=1).flatten()
        bias = eye.repeat(self.cfg.groups * self.cfg.variants)
        with torch.no_grad():
            self.sbg[2].bias.copy_(bias.to(self.sbg[2].bias.dtype))

    def project_qk(self, z_pre: torch.Tensor, z_pos: torch.Tensor):
        """Returns (normalized content, Q, K); Q/K are N x G x P x d."""
        cfg = self.cfg
        if z_pre.shape != z_pos.shape:
            raise DimensionError(f"Z_pre {tuple(z_pre.shape)} and Z_pos {tuple(z_pos.shape)} differ")
        if z_pre.shape[1] != cfg.channels:
            raise DimensionError(f"expected {cfg.channels} channels, got {z_pre.shape[1]}")
        content = self.norm_pre(z_pre)
        q = self.down_q(content)
        k = self.down_k(self.norm_pos(z_pos))
        return content, _grouped(q, cfg.groups), _grouped(k, cfg.groups), tuple(q.shape[-2:])

    def style_bank(self, z_pos: torch.Tensor) -> StyleBank:
        cfg = self.cfg
        v = self.sbg(self.down_v(z_pos))
        n, _, h, w = v.shape
        d = cfg.head_dim
        bank = v.view(n, cfg.groups, cfg.variants, d, d + 1, h * w).permute(0, 1, 5, 2, 3, 4)
        return StyleBank(bank, (h, w))

    def _reduce_variants(self, bank: torch.Tensor) -> torch.Tensor:
        # bank: N x G x P x J x d x (d+1); reducing before aggregation is exact since both are linear
        if self.cfg.reduce == "mean":
            return bank.mean(dim=3)
        return bank[:, :, :, self.cfg.variant_index % self.cfg.variants]

    def forward(self, z_pre: torch.Tensor, z_pos: torch.Tensor, return_attention: bool = False):
        cfg = self.cfg
        n, c, height, width = z_pre.shape
        d, g = cfg.head_dim, cfg.groups
        content, q, k, grid = self.project_qk(z_pre, z_pos)
        bank = self.style_bank(z_pos)
        attn = attention_weights(q, k)  # N x G x P x P
        p = attn.shape[-1]
        reduced = self._reduce_variants(bank.matrices).reshape(n, g, p, -1)
        coef = (attn @ reduced).view(n, g, p, d, d + 1)
        if cfg.modulation == "coarse":
            w_, b_ = coef[..., :d], coef[..., d]
            z = torch.einsum("ngpij,ngpj->ngpi", w_, q) + b_
            z = z.permute(0, 1, 3, 2).reshape(n, c, *grid)
            out = F.interpolate(z, size=(height, width), mode="bilinear", align_corners=False)
        else:
            # channels-last keeps the per-pixel affine contraction contiguous
            field = coef.permute(0, 1, 3, 4, 2).reshape(n, g * d * (d + 1), *grid)
            field = field.contiguous(memory_format=torch.channels_last)
            field = F.interpolate(field, size=(height, width), mode="bilinear", align_corners=False)
            field = field.permute(0, 2, 3, 1).reshape(n, height, width, g, d, d + 1)
            x = content.permute(0, 2, 3, 1).reshape(n, height, width, g, d, 1)
            out = (field[..., :d] @ x).squeeze(-1) + field[..., d]
            out = out.reshape(n, height, width, c).permute(0, 3, 1, 2)
        if return_attention:
            return out, attn
        return out


def _grouped(x: torch.Tensor, groups: int) -> torch.Tensor:
    n, c, h, w = x.shape
    return x.view(n, groups, c // groups, h * w).transpose(-1, -2)


class StandardStyleAttention(nn.Module):
    """Reference block without channel grouping or spatial downsampling.

    Same style-bank formulation, but every convolution is dense and attention
    runs over all positions with ``heads`` heads. Used as the parameter-count
    baseline; forward is only practical on small feature maps.
    """

    def __init__(self, channels: int = 256, heads: int = 16, variants: int = 8):
        super().__init__()
        self.channels, self.heads, self.variants = channels, heads, variants
        d = channels // heads
        self.norm_pre = nn.LayerNorm(channels)
        self.norm_pos = nn.LayerNorm(channels)
        self.proj_q = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.Conv2d(channels, channels, 3, padding=1))
        self.proj_k = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.Conv2d(channels, channels, 3, padding=1))
        self.proj_v = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.Conv2d(channels, channels, 3, padding=1))
        self.sbg = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, heads * variants * d * (d + 1), 3, padding=1),
        )

    def forward(self, z_pre: torch.Tensor, z_pos: torch.Tensor) -> torch.Tensor:
        n, c, h, w = z_pre.shape
        g, d = self.heads, c // self.heads
        pre = self.norm_pre(z_pre.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        pos = self.norm_pos(z_pos.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        q = _grouped(self.proj_q(pre), g)
        k = _grouped(self.proj_k(pos), g)
        bank = self.sbg(self.proj_v(z_pos)).view(n, g, self.variants * d * (d + 1), h * w)
        attn = attention_weights(q, k)
        agg = (attn @ bank.transpose(-1, -2)).view(n, g, h * w, self.variants, d, d + 1).mean(3)
        out = torch.einsum("ngpij,ngpj->ngpi", agg[..., :d], _grouped(pre, g)) + agg[..., d]
        return out.permute(0, 1, 3, 2).reshape(n, c, h, w)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


class Decoder(nn.Module):
    """Mirror of the encoder front end: conv stacks with nearest upsampling, no normalization."""

    def __init__(self, widths: tuple[int, int, int] = VGG_WIDTHS):
        super().__init__()
        c1, c2, c3 = widths
        self.in_channels = c3
        self.body = nn.Sequential(
            nn.Conv2d(c3, c2, 3, padding=1, padding_mode="reflect"),
            nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c2, c2, 3, padding=1, padding_mode="reflect"),
            nn.ReLU(),
            nn.Conv2d(c2, c1, 3, padding=1, padding_mode="reflect"),
            nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c1, c1, 3, padding=1, padding_mode="reflect"),
            nn.ReLU(),
            nn.Conv2d(c1, 3, 3, padding=1, padding_mode="reflect"),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.in_channels:
            raise DimensionError(f"decoder expects {self.in_channels} channels, got {z.shape[1]}")
        return self.body(z).clamp(0.0, 1.0)


class TranslatorModel(nn.Module):
    def __init__(self, cfg: AttentionConfig | None = None, widths: tuple[int, int, int] = VGG_WIDTHS):
        super().__init__()
        cfg = cfg or AttentionConfig(channels=widths[2])
        if cfg.channels != widths[2]:
            raise ConfigError(
                f"attention channels ({cfg.channels}) must equal the encoder's deepest width ({widths[2]})"
            )
        self.cfg = cfg
        self.widths = tuple(widths)
        self.attention = EfficientSelfAttention(cfg)
        self.decoder = Decoder(widths)

    def forward(self, z_pre: torch.Tensor, z_pos: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.attention(z_pre, z_pos))

    def initialize(self, seed: int) -> None:
        """Seeded fan-in uniform init; the bank starts at the identity transform."""
        torch.manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                bound = 1.0 / math.sqrt(m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1])
                nn.init.uniform_(m.weight, -bound * math.sqrt(3.0), bound * math.sqrt(3.0))
                if m.bias is not None:
                    nn.init.uniform_(m.bias, -bound, bound)
            elif isinstance(m, nn.GroupNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        # keep the initial bank dominated by the identity
        with torch.no_grad():
            self.attention.sbg[2].weight.mul_(0.1)
        self.attention.reset_bank_to_identity()
        last = self.decoder.body[-1]
        with torch.no_grad():
            last.weight.mul_(0.1)
            last.bias.fill_(0.5)


def translate_tensors(
    x1: torch.Tensor, x2: torch.Tensor, model: TranslatorModel, encoder: VGGEncoder
) -> torch.Tensor:
    if x1.shape != x2.shape:
        raise DimensionError(f"I1 {tuple(x1.shape)} and I2 {tuple(x2.shape)} differ")
    with torch.no_grad():
        z_pre = encoder(x1)[-1]
        z_pos = encoder(x2)[-1]
        return model(z_pre, z_pos)


def translate(I1: Raster, I2: Raster, model: TranslatorModel, encoder: VGGEncoder) -> Raster:
    """Translate ``I1`` into the style of ``I2``; output has ``I1``'s shape."""
    if I1.shape != I2.shape:
        raise DimensionError(f"I1 {I1.shape} and I2 {I2.shape} differ")
    if I1.channels != 3:
        raise DimensionError(f"translation needs 3-channel rasters, got {I1.channels}")
    for dim in I1.shape[:2]:
        if dim % 4:
            raise DimensionError(f"raster sides must be multiples of 4, got {I1.shape[:2]}")
    dtype = next(model.parameters()).dtype
    model.eval()
    out = translate_tensors(raster_to_tensor(I1, dtype), raster_to_tensor(I2, dtype), model, encoder)
    return Raster(tensor_to_array(out))


# ---------------------------------------------------------------------------
# Checkpoints: npz container + JSON manifest
# ---------------------------------------------------------------------------

MANIFEST_KEY = "__manifest__"


def digest_of(obj: Any) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_container(path: str | os.PathLike, arrays: dict[str, np.ndarray], manifest: dict) -> Path:
    """Atomically write named arrays plus a manifest of shapes and metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["arrays"] = {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in arrays.items()}
    payload = dict(arrays)
    payload[MANIFEST_KEY] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)
    return path


def read_container(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"checkpoint {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except Exception as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if MANIFEST_KEY not in arrays:
        raise DataIOError(f"{path} has no manifest")
    manifest = json.loads(arrays.pop(MANIFEST_KEY).tobytes().decode())
    return arrays, manifest


def save_checkpoint(path: str | os.PathLike, model: TranslatorModel, meta: dict | None = None) -> Path:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    manifest = {
        "kind": "translator",
        "attention": asdict(model.cfg),
        "widths": list(model.widths),
    }
    manifest.update(meta or {})
    return write_container(path, arrays, manifest)


def load_checkpoint(path: str | os.PathLike, expect_digest: str | None = None) -> tuple[TranslatorModel, dict]:
    arrays, manifest = read_container(path)
    if manifest.get("kind") != "translator":
        raise CompatibilityError(f"{path} is not a translator checkpoint")
    if expect_digest is not None and manifest.get("model_digest") != expect_digest:
        raise CompatibilityError(
            f"checkpoint {path} was trained with model digest {manifest.get('model_digest')}, "
            f"config expects {expect_digest}"
        )
    cfg = AttentionConfig(**manifest["attention"])
    model = TranslatorModel(cfg, tuple(manifest["widths"]))
    state = {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model, manifest
