"""Attention heatmaps on the slide's patch grid.

Raw per-patch scores are min-max normalized to [0, 1] (a constant or
singleton field maps to the maximum), placed at their grid positions,
smoothed with a truncated Gaussian kernel under edge-clamped boundaries, and
quantized to an 8-bit raster. Outputs are a binary PGM plus a CSV of the raw
scores; the companion figure renderer adds a PNG view.
"""

from __future__ import annotations

import math

import numpy as np


class HeatmapError(ValueError):
    pass


def gaussian_kernel(sigma):
    """Normalized 2D Gaussian, truncated at radius round(3*sigma) (min 1)."""
    if sigma <= 0:
        raise HeatmapError("sigma must be positive")
    radius = max(1, int(round(3.0 * sigma)))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    one_d = np.exp(-0.5 * (ax / sigma) ** 2)
    kernel = np.outer(one_d, one_d)
    return kernel / kernel.sum()


def smooth_grid(grid, sigma):
    """Convolve with the truncated Gaussian; borders replicate edge values."""
    kernel = gaussian_kernel(sigma)
    radius = kernel.shape[0] // 2
    padded = np.pad(grid, radius, mode="edge")
    out = np.zeros_like(grid, dtype=np.float64)
    h, w = grid.shape
    for a in range(kernel.shape[0]):
        for b in range(kernel.shape[1]):
            out += kernel[a, b] * padded[a:a + h, b:b + w]
    return out


def normalize_scores(scores):
    """Min-max to [0, 1]; a zero-range field maps to all ones (the max)."""
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    if hi - lo <= 0.0:
        return np.ones_like(scores)
    return (scores - lo) / (hi - lo)


def heatmap_raster(scores, grid_rows, grid_cols, sigma=1.0):
    """8-bit raster of the smoothed, normalized score field.

    ``grid_rows``/``grid_cols`` give each patch's cell; cells with no patch
    stay at zero before smoothing.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise HeatmapError("cannot render a heatmap for an empty slide")
    rows = np.asarray(grid_rows, dtype=int)
    cols = np.asarray(grid_cols, dtype=int)
    grid = np.zeros((rows.max() + 1, cols.max() + 1))
    grid[rows, cols] = normalize_scores(scores)
    smoothed = smooth_grid(grid, sigma)
    return np.clip(np.round(255.0 * smoothed), 0, 255).astype(np.uint8)


def write_pgm(path, raster):
    """Binary (P5) 8-bit PGM."""
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(raster.astype(np.uint8).tobytes())


def write_scores_csv(path, patch_ids, grid_rows, grid_cols, scores):
    with open(path, "w") as fh:
        fh.write("patch_id,grid_row,grid_col,score\n")
        for pid, r, c, s in zip(patch_ids, grid_rows, grid_cols, scores):
            fh.write(f"{pid},{r},{c},{s!r}\n")


def top_decile(patch_ids, scores):
    """Ids of the ceil(10%) highest-score patches; ties broken by lower id."""
    n = len(scores)
    if n == 0:
        raise HeatmapError("empty slide has no top-decile patches")
    k = math.ceil(0.10 * n)
    order = sorted(range(n), key=lambda i: (-scores[i], patch_ids[i]))
    return [patch_ids[i] for i in order[:k]]


def export_heatmap(slide, scores, sigma, pgm_path, csv_path):
    """Write the PGM raster and raw-score CSV for one slide; returns the raster."""
    if len(slide.patches) != len(scores):
        raise HeatmapError(f"got {len(scores)} scores for {len(slide.patches)} patches")
    if not slide.patches:
        raise HeatmapError(f"slide {slide.slide_id} has no patches")
    pids = [p.patch_id for p in slide.patches]
    rows = [p.grid_row for p in slide.patches]
    cols = [p.grid_col for p in slide.patches]
    raster = heatmap_raster(scores, rows, cols, sigma=sigma)
    write_pgm(pgm_path, raster)
    write_scores_csv(csv_path, pids, rows, cols, scores)
    return raster
