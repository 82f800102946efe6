"""Versioned YAML pipeline configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .change import FcmConfig, ForestConfig, ThresholdConfig
from .errors import ConfigError
from .training import TrainConfig
from .translator import AttentionConfig, digest_of

SCHEMA_VERSION = 1


@dataclass
class PathsSection:
    pre_image: str | None = None
    post_image: str | None = None
    reference: str | None = None
    workdir: str = "shiftcd-run"


@dataclass
class EncoderSection:
    weights: str | None = None
    surrogate_seed: int = 0


@dataclass
class TranslatorSection:
    groups: int = 16
    downsample: int = 4
    variants: int = 8
    reduce: str = "mean"
    variant_index: int = 0
    modulation: str = "full"


@dataclass
class TrainingSection:
    learning_rate: float = 1e-4
    lr_decay: float = 0.5
    epochs: int = 5000
    decay_interval: int | None = None
    crops_per_epoch: int | None = None
    batch_size: int = 1
    gamma: float = 1000.0


@dataclass
class AffinitySection:
    patch_size: int = 8


@dataclass
class TilingSection:
    tile_size: int = 256
    overlap: float = 0.29


@dataclass
class FcmSection:
    fuzzifier: float = 2.0
    tol: float = 1e-5
    max_iter: int = 100


@dataclass
class ThresholdSection:
    window: int = 33
    offset: float = 0.5


@dataclass
class ForestSection:
    n_trees: int = 100
    max_depth: int | None = None
    max_features: str | float = "sqrt"
    max_per_class: int | None = None
    n_jobs: int = 1


@dataclass
class DetectSection:
    translation: str = "learned"  # "learned" | "identity"


@dataclass
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    translator: TranslatorSection = field(default_factory=TranslatorSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    affinity: AffinitySection = field(default_factory=AffinitySection)
    tiling: TilingSection = field(default_factory=TilingSection)
    fcm: FcmSection = field(default_factory=FcmSection)
    threshold: ThresholdSection = field(default_factory=ThresholdSection)
    forest: ForestSection = field(default_factory=ForestSection)
    detect: DetectSection = field(default_factory=DetectSection)

    def __post_init__(self):
        if self.detect.translation not in ("learned", "identity"):
            raise ConfigError(f"detect.translation must be 'learned' or 'identity', got {self.detect.translation!r}")
        if not 0.0 <= self.tiling.overlap < 1.0:
            raise ConfigError(f"tiling.overlap must be in [0, 1), got {self.tiling.overlap}")
        if self.tiling.tile_size < 4 or self.tiling.tile_size % 4:
            raise ConfigError(f"tiling.tile_size must be a positive multiple of 4, got {self.tiling.tile_size}")
        # building the module-level configs runs their own validation
        self.attention_config()
        self.train_config()
        self.fcm_config()
        self.threshold_config()
        self.forest_config()

    # -- module configs -----------------------------------------------------

    def attention_config(self, channels: int = 256) -> AttentionConfig:
        return AttentionConfig(channels=channels, **asdict(self.translator))

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            **asdict(self.training),
            seed=self.seed,
            tile_size=self.tiling.tile_size,
            overlap=self.tiling.overlap,
            affinity_patch=self.affinity.patch_size,
        )

    def fcm_config(self) -> FcmConfig:
        return FcmConfig(**asdict(self.fcm))

    def threshold_config(self) -> ThresholdConfig:
        return ThresholdConfig(**asdict(self.threshold))

    def forest_config(self) -> ForestConfig:
        return ForestConfig(**asdict(self.forest))

    # -- digests --------------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        """Covers every setting except file locations."""
        data = self.to_dict()
        data.pop("paths")
        return digest_of(data)

    def model_digest(self) -> str:
        """Covers only what determines the trained translator."""
        data = self.to_dict()
        keys = ("seed", "encoder", "translator", "training", "affinity", "tiling")
        return digest_of({k: data[k] for k in keys})


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _check_value(value: Any, hint: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(hint)
        if value is None and type(None) in options:
            return None
        for opt in options:
            if opt is type(None):
                continue
            try:
                return _check_value(value, opt, where)
            except ConfigError:
                pass
        raise ConfigError(f"{where}: unsupported value {value!r}")
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: cannot validate type {hint}")


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {'.'.join(filter(None, [where, unknown[0]]))}")
    kwargs = {}
    for name, value in data.items():
        path = f"{where}.{name}" if where else name
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value if value is not None else {}, path)
        else:
            kwargs[name] = _check_value(value, hint, path)
    return cls(**kwargs)


def config_from_dict(data: dict[str, Any], base_dir: str | os.PathLike | None = None) -> PipelineConfig:
    data = dict(data or {})
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported version {version!r} (expected {SCHEMA_VERSION})")
    cfg = _build(PipelineConfig, data, "")
    if base_dir is not None:
        # input images are found next to the config; the workdir stays relative to the caller
        base = Path(base_dir)
        for name in ("pre_image", "post_image", "reference"):
            value = getattr(cfg.paths, name)
            if value is not None and not Path(value).is_absolute():
                setattr(cfg.paths, name, str(base / value))
    return cfg


def load_config(path: str | os.PathLike) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(data or {}, base_dir=path.parent)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
