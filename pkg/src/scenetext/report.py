"""Figure rendering for evaluation reports and attention dumps.

Kept separate so library users who never touch the report path do not
pay the matplotlib import. Always renders through the Agg backend; these
figures go to files, never to a display.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_heatmap_grid(heatmaps, path: str | Path) -> None:
    """Write a labeled grid of attention heatmaps to one figure.

    heatmaps is a sequence of (label, 2-D array) pairs; arrays are shown
    on a shared 0..255 scale.
    """
    heatmaps = list(heatmaps)
    if not heatmaps:
        raise ValueError("no heatmaps to draw")
    cols = min(4, len(heatmaps))
    rows = math.ceil(len(heatmaps) / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 3.2 * rows), squeeze=False)
    last = None
    for ax in axes.flat:
        ax.set_axis_off()
    for ax, (label, heat) in zip(axes.flat, heatmaps):
        last = ax.imshow(np.asarray(heat), cmap="magma", vmin=0, vmax=255)
        ax.set_title(label, fontsize=10)
    fig.colorbar(last, ax=axes, shrink=0.8, label="attention (scaled)")
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_chart(metrics: dict, path: str | Path) -> None:
    """Bar chart of accuracy and edit accuracy per language tag."""
    if not metrics:
        raise ValueError("no metrics to draw")
    langs = sorted(metrics)
    acc = [metrics[l]["accuracy"] for l in langs]
    edit = [metrics[l]["edit_accuracy"] for l in langs]
    x = np.arange(len(langs))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(langs)), 4.0))
    ax.bar(x - width / 2, acc, width, label="word accuracy")
    ax.bar(x + width / 2, edit, width, label="edit accuracy")
    ax.set_xticks(x)
    ax.set_xticklabels(
        [f"{l}\n(n={metrics[l]['n']})" for l in langs], fontsize=9
    )
    ax.set_ylim(0, 105)
    ax.set_ylabel("percent")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
