"""Reliable-pixel extraction and the final binary change map."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.ndimage import gaussian_filter
from sklearn.ensemble import RandomForestClassifier

from .errors import ClassifierError, ConfigError, ConsistencyError, DegenerateInputError, DimensionError
from .imagery import Raster
from .seeding import substream, subseed

logger = logging.getLogger(__name__)


class Label(IntEnum):
    UNCHANGED = 0
    UNCERTAIN = 1
    CHANGED = 2


TRINARY_PALETTE = {Label.UNCHANGED: 0, Label.UNCERTAIN: 128, Label.CHANGED: 255}
BINARY_PALETTE = {0: 0, 1: 255}


@dataclass(frozen=True)
class FcmConfig:
    fuzzifier: float = 2.0
    tol: float = 1e-5
    max_iter: int = 100

    def __post_init__(self):
        if not self.fuzzifier > 1.0:
            raise ConfigError(f"fcm.fuzzifier must be > 1, got {self.fuzzifier}")
        if self.tol <= 0:
            raise ConfigError(f"fcm.tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ConfigError(f"fcm.max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True)
class ThresholdConfig:
    window: int = 33
    offset: float = 0.5

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError(f"threshold.window must be odd and >= 3, got {self.window}")


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    max_features: str | float = "sqrt"
    max_per_class: int | None = None
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError(f"forest.n_trees must be >= 1, got {self.n_trees}")
        if self.max_per_class is not None and self.max_per_class < 1:
            raise ConfigError(f"forest.max_per_class must be >= 1, got {self.max_per_class}")


# ---------------------------------------------------------------------------
# Fuzzy c-means
# ---------------------------------------------------------------------------


@dataclass
class FcmResult:
    centers: np.ndarray  # (3,), ascending
    memberships: np.ndarray  # H x W x 3, columns follow ``centers``
    labels: np.ndarray  # H x W, Label values
    objective: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = True


def _memberships(x: np.ndarray, centers: np.ndarray, fuzzifier: float) -> np.ndarray:
    dist = np.abs(x[:, None] - centers[None, :])
    exact = dist == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = dist ** (-2.0 / (fuzzifier - 1.0))
        u = inv / inv.sum(axis=1, keepdims=True)
    hit = exact.any(axis=1)
    if hit.any():
        # a sample sitting on a center belongs to it entirely
        u[hit] = exact[hit] / exact[hit].sum(axis=1, keepdims=True)
    return u


def _initial_centers(x: np.ndarray) -> np.ndarray:
    centers = np.percentile(x, [10, 50, 90])
    if np.unique(centers).size == 3:
        return centers
    lo, hi = float(x.min()), float(x.max())
    return lo + (hi - lo) * np.array([0.1, 0.5, 0.9])


def fcm_cluster(D: np.ndarray, cfg: FcmConfig = FcmConfig()) -> FcmResult:
    """Three-cluster fuzzy c-means on scalar intensities, clusters ordered by center."""
    D = np.asarray(D, dtype=np.float64)
    if D.size == 0:
        raise DimensionError("difference map is empty")
    if not np.isfinite(D).all():
        raise DegenerateInputError("difference map contains non-finite values")
    x = D.ravel()
    if x.max() == x.min():
        raise DegenerateInputError("difference map is constant")
    m = cfg.fuzzifier
    centers = _initial_centers(x)
    u = _memberships(x, centers, m)
    objective = [float(((u**m) * (x[:, None] - centers) ** 2).sum())]
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        um = u**m
        new = (um * x[:, None]).sum(axis=0) / um.sum(axis=0)
        shift = float(np.abs(new - centers).max())
        centers = new
        u = _memberships(x, centers, m)
        objective.append(float(((u**m) * (x[:, None] - centers) ** 2).sum()))
        if shift < cfg.tol:
            converged = True
            break
    if not converged:
        logger.warning("FCM did not converge in %d iterations", cfg.max_iter)
    order = np.argsort(centers, kind="stable")
    centers = centers[order]
    u = u[:, order]
    labels = np.asarray([Label.UNCHANGED, Label.UNCERTAIN, Label.CHANGED], dtype=np.uint8)[u.argmax(axis=1)]
    return FcmResult(
        centers=centers,
        memberships=u.reshape(*D.shape, 3),
        labels=labels.reshape(D.shape),
        objective=objective,
        iterations=it,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# Adaptive threshold and fusion
# ---------------------------------------------------------------------------


def adaptive_threshold(D: np.ndarray, cfg: ThresholdConfig = ThresholdConfig()) -> np.ndarray:
    """CHANGED where D >= Gaussian local mean + offset * global std, else UNCHANGED."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.size == 0:
        raise DimensionError(f"difference map must be a nonempty 2-D array, got shape {D.shape}")
    spread = D.std()
    if spread == 0:
        # a flat map carries no change evidence
        return np.full(D.shape, Label.UNCHANGED, dtype=np.uint8)
    window = cfg.window
    limit = min(D.shape)
    if window > limit:
        clamped = max(limit if limit % 2 else limit - 1, 1)
        logger.warning("threshold window %d exceeds image size %s; using %d", window, D.shape, clamped)
        window = clamped
    sigma = window / 6.0
    local = gaussian_filter(D, sigma=sigma, mode="reflect", truncate=(window // 2) / sigma)
    T = local + cfg.offset * spread
    return np.where(D >= T, Label.CHANGED, Label.UNCHANGED).astype(np.uint8)


def fuse(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Agreement of clustering and threshold is reliable; everything else is uncertain."""
    if p1.shape != p2.shape:
        raise DimensionError(f"label maps differ in shape: {p1.shape} vs {p2.shape}")
    out = np.full(p1.shape, Label.UNCERTAIN, dtype=np.uint8)
    out[(p1 == Label.CHANGED) & (p2 == Label.CHANGED)] = Label.CHANGED
    out[(p1 == Label.UNCHANGED) & (p2 == Label.UNCHANGED)] = Label.UNCHANGED
    return out


# ---------------------------------------------------------------------------
# Classifier on stacked pixel pairs
# ---------------------------------------------------------------------------


@dataclass
class SampleSets:
    train_features: np.ndarray  # N x 2C
    train_labels: np.ndarray  # N, 1 = changed
    train_positions: np.ndarray  # flat pixel indices
    query_features: np.ndarray  # M x 2C
    query_positions: np.ndarray

    @property
    def feature_width(self) -> int:
        return self.train_features.shape[1]


def _stack(I1: Raster, I2: Raster) -> np.ndarray:
    return np.concatenate([I1.data, I2.data], axis=2).reshape(-1, I1.channels + I2.channels)


def build_sample_sets(
    I1: Raster, I2: Raster, fused: np.ndarray, seed: int, max_per_class: int | None = None
) -> SampleSets:
    if I1.shape != I2.shape or fused.shape != I1.shape[:2]:
        raise DimensionError(f"shape mismatch: I1 {I1.shape}, I2 {I2.shape}, labels {fused.shape}")
    flat = fused.ravel()
    changed = np.flatnonzero(flat == Label.CHANGED)
    unchanged = np.flatnonzero(flat == Label.UNCHANGED)
    if changed.size == 0 or unchanged.size == 0:
        raise DegenerateInputError(
            f"reliable set lacks a class: {changed.size} changed, {unchanged.size} unchanged"
        )
    n = min(changed.size, unchanged.size)
    if max_per_class is not None:
        n = min(n, max_per_class)
    rng = substream(seed, "balancing")
    keep = []
    for idx in (changed, unchanged):
        keep.append(idx if idx.size == n else np.sort(rng.choice(idx, size=n, replace=False)))
    positions = np.concatenate(keep)
    labels = np.concatenate([np.ones(n, np.uint8), np.zeros(n, np.uint8)])
    feats = _stack(I1, I2)
    query = np.flatnonzero(flat == Label.UNCERTAIN)
    return SampleSets(feats[positions], labels, positions, feats[query], query)


def fit_forest(sets: SampleSets, cfg: ForestConfig, seed: int) -> RandomForestClassifier:
    if np.unique(sets.train_labels).size < 2:
        raise ClassifierError("training samples contain a single class")
    forest = RandomForestClassifier(
        n_estimators=cfg.n_trees,
        max_depth=cfg.max_depth,
        max_features=cfg.max_features,
        bootstrap=True,
        n_jobs=cfg.n_jobs,
        random_state=subseed(seed, "forest"),
    )
    return forest.fit(sets.train_features, sets.train_labels)


def classify_remaining(
    sets: SampleSets, cfg: ForestConfig = ForestConfig(), seed: int = 0
) -> tuple[np.ndarray, RandomForestClassifier | None]:
    """Predicted labels (1 = changed) for the uncertain pixels, plus the fitted forest."""
    if sets.query_positions.size == 0:
        return np.zeros(0, dtype=np.uint8), None
    forest = fit_forest(sets, cfg, seed)
    return forest.predict(sets.query_features).astype(np.uint8), forest


def final_change_map(fused: np.ndarray, query_positions: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """Binary map: reliable labels kept, uncertain pixels filled from the classifier."""
    uncertain = np.flatnonzero(fused.ravel() == Label.UNCERTAIN)
    if predicted.shape != query_positions.shape or not np.array_equal(np.sort(query_positions), uncertain):
        raise ConsistencyError(
            f"predictions cover {query_positions.size} pixels but {uncertain.size} are uncertain"
        )
    out = (fused == Label.CHANGED).astype(np.uint8).ravel()
    out[query_positions] = predicted
    return out.reshape(fused.shape)


# ---------------------------------------------------------------------------
# Whole stage
# ---------------------------------------------------------------------------


@dataclass
class ChangeResult:
    change_map: np.ndarray  # H x W in {0, 1}
    threshold_map: np.ndarray
    cluster_map: np.ndarray | None = None
    fused: np.ndarray | None = None
    fcm: FcmResult | None = None
    forest: RandomForestClassifier | None = None
    fallback: str | None = None


def extract_changes(
    D: np.ndarray,
    I1: Raster,
    I2: Raster,
    seed: int = 0,
    fcm_cfg: FcmConfig = FcmConfig(),
    threshold_cfg: ThresholdConfig = ThresholdConfig(),
    forest_cfg: ForestConfig = ForestConfig(),
) -> ChangeResult:
    """Run clustering, thresholding, fusion and the classifier; degrade to the threshold map."""
    p2 = adaptive_threshold(D, threshold_cfg)
    binary_p2 = (p2 == Label.CHANGED).astype(np.uint8)
    try:
        fcm = fcm_cluster(D, fcm_cfg)
    except DegenerateInputError as exc:
        logger.warning("falling back to the threshold map: %s", exc)
        return ChangeResult(binary_p2, p2, fallback=str(exc))
    fused = fuse(fcm.labels, p2)
    try:
        sets = build_sample_sets(I1, I2, fused, seed, forest_cfg.max_per_class)
        predicted, forest = classify_remaining(sets, forest_cfg, seed)
    except (DegenerateInputError, ClassifierError) as exc:
        logger.warning("falling back to the threshold map: %s", exc)
        return ChangeResult(binary_p2, p2, fcm.labels, fused, fcm, fallback=str(exc))
    change_map = final_change_map(fused, sets.query_positions, predicted)
    return ChangeResult(change_map, p2, fcm.labels, fused, fcm, forest)
