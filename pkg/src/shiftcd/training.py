"""Translation objective and the training loop."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .affinity import AffinityMap, affinity_weight, weighted_style
from .encoder import VGGEncoder, raster_to_tensor
from .errors import ConfigError, DimensionError, NumericError
from .imagery import Raster, tile
from .seeding import substream, subseed
from .translator import AttentionConfig, TranslatorModel

logger = logging.getLogger(__name__)

Stats = list[tuple[torch.Tensor, torch.Tensor]]


@dataclass
class LossReport:
    wt_loss: float
    content_loss: float
    total: float
    gamma: float


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    lr_decay: float = 0.5
    epochs: int = 5000
    decay_interval: int | None = None  # None -> epochs // 5
    crops_per_epoch: int | None = None  # None -> every crop once per epoch
    batch_size: int = 1
    gamma: float = 1000.0
    seed: int = 0
    tile_size: int = 256
    overlap: float = 0.29
    affinity_patch: int = 8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("training.learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("training.epochs must be at least 1")
        if self.gamma <= 0:
            raise ConfigError("training.gamma must be positive")
        if self.batch_size != 1:
            raise ConfigError("training.batch_size: only batch size 1 is supported")
        if self.crops_per_epoch is not None and self.crops_per_epoch < 1:
            raise ConfigError("training.crops_per_epoch must be at least 1")

    @property
    def step_size(self) -> int:
        return max(1, self.decay_interval or self.epochs // 5)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def feature_stats(levels: Sequence[torch.Tensor]) -> Stats:
    """Per-channel spatial mean and (population) variance of each level."""
    stats = []
    for level in levels:
        flat = level.flatten(2)
        stats.append((flat.mean(dim=2), flat.var(dim=2, unbiased=False)))
    return stats


def moment_loss(stats_a: Stats, stats_b: Stats) -> torch.Tensor:
    """Sum over levels of squared mean gaps plus squared variance gaps."""
    total = 0.0
    for (mu_a, var_a), (mu_b, var_b) in zip(stats_a, stats_b, strict=True):
        total = total + (mu_a - mu_b).pow(2).sum() + (var_a - var_b).pow(2).sum()
    return total


def feature_content_loss(levels_a: Sequence[torch.Tensor], levels_b: Sequence[torch.Tensor]) -> torch.Tensor:
    total = 0.0
    for a, b in zip(levels_a, levels_b, strict=True):
        total = total + (a - b).pow(2).mean()
    return total


def _check_finite(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite {what}")


def _as_tensor(image: Raster | torch.Tensor, encoder: VGGEncoder) -> torch.Tensor:
    dtype = next(encoder.parameters()).dtype
    if isinstance(image, Raster):
        return raster_to_tensor(image, dtype)
    return image.to(dtype)


def weighted_translation_loss(I_hat, I_w, encoder: VGGEncoder) -> torch.Tensor:
    a, b = _as_tensor(I_hat, encoder), _as_tensor(I_w, encoder)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    fa, fb = encoder(a), encoder(b)
    for level in fa:
        _check_finite(level, "activations")
    return moment_loss(feature_stats(fa), feature_stats(fb))


def content_loss(I_hat, I1, encoder: VGGEncoder) -> torch.Tensor:
    a, b = _as_tensor(I_hat, encoder), _as_tensor(I1, encoder)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    fa, fb = encoder(a), encoder(b)
    for level in fa:
        _check_finite(level, "activations")
    return feature_content_loss(fa, fb)


def combine(wt: float, content: float, gamma: float) -> LossReport:
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    return LossReport(float(wt), float(content), float(wt) + gamma * float(content), float(gamma))


def total_loss(I_hat, I_w, I1, encoder: VGGEncoder, gamma: float = 1000.0) -> LossReport:
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    with torch.no_grad():
        wt = weighted_translation_loss(I_hat, I_w, encoder)
        c = content_loss(I_hat, I1, encoder)
    return combine(wt.item(), c.item(), gamma)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class CropTargets:
    z_pre: torch.Tensor
    z_pos: torch.Tensor
    content: list[torch.Tensor]
    style: Stats


@dataclass
class TrainResult:
    model: TranslatorModel
    log: list[dict] = field(default_factory=list)
    affinity: AffinityMap | None = None
    weighted: Raster | None = None


class TrainingDiverged(NumericError):
    def __init__(self, message: str, model: TranslatorModel, log: list[dict]):
        super().__init__(message)
        self.model = model
        self.log = log


def crop_targets(c1: torch.Tensor, c2: torch.Tensor, cw: torch.Tensor, encoder: VGGEncoder) -> CropTargets:
    with torch.no_grad():
        f1 = encoder(c1)
        z_pos = encoder(c2)[-1]
        style = feature_stats(encoder(cw))
    return CropTargets(f1[-1], z_pos, f1, style)


def step_loss(model: TranslatorModel, encoder: VGGEncoder, t: CropTargets, gamma: float):
    I_hat = model(t.z_pre, t.z_pos)
    levels = encoder(I_hat)
    wt = moment_loss(feature_stats(levels), t.style)
    c = feature_content_loss(levels, t.content)
    return wt, c, wt + gamma * c


def train(
    I1: Raster,
    I2: Raster,
    cfg: TrainConfig,
    encoder: VGGEncoder,
    attention: AttentionConfig | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Fit the translator on aligned overlapping crops of the pair.

    The affinity map and weighted style image are computed once up front. Each
    epoch visits a seeded shuffle of the crops (optionally truncated to
    ``crops_per_epoch``), one crop per Adam step; the learning rate is halved
    every ``step_size`` epochs.
    """
    if I1.shape != I2.shape:
        raise DimensionError(f"I1 {I1.shape} and I2 {I2.shape} differ")
    attention = attention or AttentionConfig(channels=encoder.out_channels)
    dtype = next(encoder.parameters()).dtype

    alpha = affinity_weight(I1, I2, cfg.affinity_patch, encoder)
    I_w = weighted_style(I1, I2, alpha)

    size = min(cfg.tile_size, I1.height, I1.width)
    if size != cfg.tile_size:
        logger.warning("scene smaller than tile size; training on %d px crops", size)
    t1, _ = tile(I1, size, cfg.overlap)
    t2, _ = tile(I2, size, cfg.overlap)
    tw, _ = tile(I_w, size, cfg.overlap)
    targets = [
        crop_targets(raster_to_tensor(a, dtype), raster_to_tensor(b, dtype), raster_to_tensor(w, dtype), encoder)
        for a, b, w in zip(t1, t2, tw)
    ]

    model = TranslatorModel(attention, encoder.widths)
    model.initialize(subseed(cfg.seed, "init"))
    model.to(dtype)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.step_size, gamma=cfg.lr_decay)
    rng = substream(cfg.seed, "crop-shuffle")
    per_epoch = min(cfg.crops_per_epoch or len(targets), len(targets))

    log: list[dict] = []
    last_good = copy.deepcopy(model.state_dict())
    for epoch in range(1, cfg.epochs + 1):
        lr = opt.param_groups[0]["lr"]
        order = rng.permutation(len(targets))[:per_epoch]
        sums = np.zeros(3)
        for idx in order:
            wt, c, loss = step_loss(model, encoder, targets[idx], cfg.gamma)
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", model, log)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums += (wt.item(), c.item(), loss.item())
        sched.step()
        last_good = copy.deepcopy(model.state_dict())
        means = sums / len(order)
        row = {
            "epoch": epoch,
            "lr": lr,
            "wt_loss": float(means[0]),
            "content_loss": float(means[1]),
            "total": float(means[2]),
        }
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    return TrainResult(model, log, alpha, I_w)


LOG_FIELDS = ("epoch", "lr", "wt_loss", "content_loss", "total")


def format_loss_log(rows: Sequence[dict], header: dict | None = None) -> str:
    lines = []
    for key, value in (header or {}).items():
        lines.append(f"# {key}={value}")
    lines.append(",".join(LOG_FIELDS))
    for row in rows:
        lines.append(",".join(repr(row[k]) if k != "epoch" else str(row[k]) for k in LOG_FIELDS))
    return "\n".join(lines) + "\n"


def parse_loss_log(text: str) -> list[dict]:
    rows = []
    body = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    for line in body[1:]:
        parts = line.split(",")
        rows.append({"epoch": int(parts[0]), **{k: float(v) for k, v in zip(LOG_FIELDS[1:], parts[1:])}})
    return rows


# ---------------------------------------------------------------------------
# Finite-difference validation
# ---------------------------------------------------------------------------


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.nn.Parameter],
    n_samples: int = 20,
    eps: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences over sampled entries."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for g in grads:
        if not torch.isfinite(g).all():
            raise NumericError("non-finite analytic gradient")
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(sizes.sum(), size=min(n_samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for fi in flat_idx:
            which = int(np.searchsorted(offsets, fi, side="right") - 1)
            local = int(fi - offsets[which])
            view = params[which].view(-1)
            orig = view[local].item()
            view[local] = orig + eps
            up = loss_fn().item()
            view[local] = orig - eps
            down = loss_fn().item()
            view[local] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[which].reshape(-1)[local].item()
            worst = max(worst, abs(analytic - numeric) / (abs(analytic) + 1e-8))
    return worst


def gradient_check(
    model: TranslatorModel,
    encoder: VGGEncoder,
    crop_pair: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    eps: float = 1e-4,
    n_samples: int = 20,
    gamma: float = 1000.0,
    seed: int = 0,
) -> float:
    """Check d(L_wt + gamma * L_c)/d(theta) on one (I1, I2, I_w) crop triple."""
    c1, c2, cw = crop_pair
    targets = crop_targets(c1, c2, cw, encoder)

    def loss_fn():
        return step_loss(model, encoder, targets, gamma)[2]

    return finite_difference_check(loss_fn, list(model.parameters()), n_samples, eps, seed)
