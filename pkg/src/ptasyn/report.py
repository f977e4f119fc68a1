"""Figure rendering for CLI reports.

Every figure is written to a file next to the delimited output it
visualizes; nothing here is ever read back by the pipeline.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import RANGE_SIGNED, signed_to_unit_array

_CURVE_COLUMNS = ("total", "syn", "cycle", "adv_g", "adv_d", "sgp", "lsc")


def save_loss_curves(reports, path, title="training loss") -> None:
    """Line plot of the per-iteration loss columns from a LossReport stream."""
    if not reports:
        return
    iterations = [r.iteration for r in reports]
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    for column in _CURVE_COLUMNS:
        values = [getattr(r, column) for r in reports]
        if any(v != 0.0 for v in values):
            ax.plot(iterations, values, label=column, linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_history_curve(history, path, label, title) -> None:
    """Single-series loss curve for the pretraining stages."""
    if not history:
        return
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    ax.plot(range(len(history)), history, linewidth=1.0, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_metric_bars(report, path) -> None:
    """Bar chart of the metric report (FID down, IS up, MS-SSIM down)."""
    labels = ["FID (lower)", "IS (higher)", "MS-SSIM (lower)"]
    values = [report.fid, report.is_mean, report.msssim_mean]
    errors = [0.0, report.is_std, report.msssim_std]
    fig, axes = plt.subplots(1, 3, figsize=(7.2, 2.8))
    for ax, label, value, err in zip(axes, labels, values, errors):
        ax.bar([0], [value], yerr=[err] if err else None, width=0.5, color="#4878a8")
        ax.set_xticks([])
        ax.set_title(label, fontsize=9)
        ax.text(0, value, f"{value:.3f}", ha="center", va="bottom", fontsize=8)
    fig.suptitle(f"metrics ({report.msssim_mode} MS-SSIM)", fontsize=10)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_slice_montage(dataset, path, max_tiles=16, title=None) -> None:
    """Grayscale montage of the first slices of a dataset."""
    n = min(len(dataset.slices), max_tiles)
    cols = min(n, 8)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(1.2 * cols, 1.2 * rows))
    axes = np.atleast_1d(axes).ravel()
    for i in range(len(axes)):
        axes[i].axis("off")
        if i >= n:
            continue
        s = dataset.slices[i]
        px = signed_to_unit_array(s.pixels) if s.intensity_range == RANGE_SIGNED else s.pixels
        axes[i].imshow(px, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
        axes[i].set_title(f"{s.volume_id}/{s.slice_index}", fontsize=5)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
