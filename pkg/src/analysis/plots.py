"""Figures for runs: loss curves, synthetic image grids, filter counts"""
import logging
import math
from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from src.models import LossRecord  # noqa: E402

logger = logging.getLogger(__name__)


def plot_loss_curves(history: Sequence[LossRecord], path: Path) -> Path:
    """L_total, L_out and L_inter per fine-tuning step"""
    df = pd.DataFrame([record.to_dict() for record in history])
    fig, ax = plt.subplots(figsize=(8, 4.5))
    if not df.empty:
        for column, label in (("l_total", "L_DFBF"), ("l_out", "L_out"), ("l_inter", "L_inter")):
            ax.plot(df["step"], df[column], label=label, linewidth=1.2)
        ax.set_yscale("log" if (df["l_total"] > 0).all() else "linear")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_image_grid(images: np.ndarray, path: Path, max_images: int = 64, ncols: int = 8) -> Path:
    """First ``max_images`` images of a [M,3,h,w] batch in [0,1]"""
    shown = images[:max_images]
    nrows = max(1, math.ceil(len(shown) / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(ncols * 1.2, nrows * 1.2), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, image in zip(axes.flat, shown):
        ax.imshow(np.clip(image.transpose(1, 2, 0), 0.0, 1.0), interpolation="nearest")
    fig.tight_layout(pad=0.2)
    return _save(fig, path)


def plot_filter_counts(counts: Dict[str, int], path: Path, baseline: Optional[Dict[str, int]] = None) -> Path:
    """Output filters per backbone conv, optionally against the unpruned counts"""
    layers = list(counts)
    x = np.arange(len(layers))
    fig, ax = plt.subplots(figsize=(max(6, len(layers) * 0.5), 4))
    if baseline:
        ax.bar(x, [baseline.get(layer, 0) for layer in layers], color="lightgray", label="before")
    ax.bar(x, [counts[layer] for layer in layers], color="tab:blue", label="filters")
    ax.set_xticks(x)
    ax.set_xticklabels(layers, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("filters")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Saved figure to {path}")
    return path
