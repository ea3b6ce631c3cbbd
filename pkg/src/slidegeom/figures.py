"""Matplotlib renderings saved next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import METRIC_NAMES


def render_metrics_figure(report, path):
    """Bar of mean +- std per metric with per-fold points overlaid."""
    summary = report.summary()
    means = [summary[m]["mean"] for m in METRIC_NAMES]
    stds = [summary[m]["std"] for m in METRIC_NAMES]
    x = np.arange(len(METRIC_NAMES))

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x, means, yerr=stds, capsize=4, color="#6baed6", edgecolor="black", zorder=2)
    for i, name in enumerate(METRIC_NAMES):
        vals = [f[name] for f in report.folds]
        ax.scatter([i] * len(vals), vals, color="black", s=14, zorder=3)
    ax.set_xticks(x)
    ax.set_xticklabels([m.upper() for m in METRIC_NAMES])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(f"{len(report.folds)}-fold metrics (mean ± std)")
    ax.grid(axis="y", alpha=0.3, zorder=0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_loss_figure(histories, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for i, h in enumerate(histories):
        ax1.plot(h["step_losses"], alpha=0.7, lw=0.8, label=f"fold {i}")
        if h["val_losses"]:
            ax2.plot(h["val_losses"], alpha=0.8, label=f"fold {i}")
    ax1.set_xlabel("optimizer step")
    ax1.set_ylabel("batch loss")
    ax1.set_title("training loss")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation loss")
    ax2.set_title("validation loss")
    ax2.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_heatmap_figure(raster, path, slide_id=None):
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(raster, cmap="inferno", vmin=0, vmax=255, interpolation="nearest")
    fig.colorbar(im, ax=ax, label="attention (8-bit)")
    ax.set_xlabel("grid column")
    ax.set_ylabel("grid row")
    if slide_id is not None:
        ax.set_title(f"slide {slide_id} attention")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
