"""Report figures written to PNG files (Agg backend, no display needed)."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

TRINARY_CMAP = ListedColormap(["#1b1b1b", "#c8a400", "#f5f5f5"])


def _save(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss(rows: Sequence[dict], path: str | os.PathLike, title: str = "training loss") -> Path:
    epochs = [r["epoch"] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    for ax, key, label in zip(axes, ("total", "wt_loss", "content_loss"), ("total", "style moments", "content")):
        ax.plot(epochs, [r[key] for r in rows], lw=1)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_title(label)
    fig.suptitle(title)
    return _save(fig, path)


def plot_map(values: np.ndarray, path: str | os.PathLike, title: str, cmap: str = "viridis", vmin=None, vmax=None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    im = ax.imshow(values, cmap=cmap, vmin=vmin, vmax=vmax, interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title(title)
    ax.axis("off")
    return _save(fig, path)


def plot_trinary(labels: np.ndarray, path: str | os.PathLike, title: str = "reliable samples") -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(labels, cmap=TRINARY_CMAP, vmin=0, vmax=2, interpolation="nearest")
    ax.set_title(f"{title} (dark: unchanged, amber: uncertain, light: changed)", fontsize=8)
    ax.axis("off")
    return _save(fig, path)


def plot_panels(images: dict[str, np.ndarray], path: str | os.PathLike) -> Path:
    """Side-by-side panels; 2-D arrays are drawn in grey."""
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.4))
    axes = np.atleast_1d(axes)
    for ax, (name, img) in zip(axes, images.items()):
        ax.imshow(img, cmap="gray" if img.ndim == 2 else None, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    return _save(fig, path)
