"""Handcrafted per-nucleus features: morphology, co-occurrence texture, topology.

Each nucleus contributes a 20-value row: 8 morphology values, 5 texture
statistics from a pooled gray-level co-occurrence matrix, 3 neighborhood
values, and a 4-way one-hot over {tumor, inflammatory, stroma, epithelial}.
Necrotic nuclei are excluded before feature extraction. The 16 numeric
columns are z-scored per slide; the fixed column order is part of the
on-disk contract and must not change.

All functions here are pure; callers may evaluate nuclei in parallel and run
the per-slide standardization as a final single-threaded pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

MICRONS_PER_PIXEL = 0.549
CLASS_NAMES = ("tumor", "inflammatory", "stroma", "necrosis", "epithelial")
ONEHOT_CLASSES = ("tumor", "inflammatory", "stroma", "epithelial")
DEFAULT_NEIGHBOR_RADIUS_UM = 54.9
DEFAULT_GLCM_LEVELS = 8
DEFAULT_GLCM_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))

MORPHOLOGY_DIM = 8
TEXTURE_DIM = 5
TOPOLOGY_DIM = 3
NUMERIC_DIM = MORPHOLOGY_DIM + TEXTURE_DIM + TOPOLOGY_DIM
FEATURE_DIM = NUMERIC_DIM + len(ONEHOT_CLASSES)


class FeatureError(ValueError):
    """A nucleus record cannot produce valid features."""


class FilteredClassError(FeatureError):
    """Raised for nucleus classes the pipeline excludes (necrosis)."""


@dataclass(frozen=True)
class Nucleus:
    """One segmented cell: centroid and contour in patch pixel coordinates
    (0.549 um per pixel), a class label, and a small grayscale intensity tile
    covering the nucleus bounding box (values 0..255)."""

    id: int
    centroid: tuple
    contour: np.ndarray        # (V, 2) float, counter-clockwise, simple
    class_label: str
    intensity_tile: np.ndarray  # (H, W) uint8


def polygon_area(contour) -> float:
    """Signed shoelace area in px^2 (positive for counter-clockwise)."""
    c = np.asarray(contour, dtype=np.float64)
    x, y = c[:, 0], c[:, 1]
    x1, y1 = np.roll(x, -1), np.roll(y, -1)
    return 0.5 * float(np.sum(x * y1 - x1 * y))


def _polygon_moments(c):
    """Area, centroid, and second central moments of a polygon region.

    Coordinates are shifted to their vertex mean first: the moments are
    translation-invariant analytically, and the local frame avoids the
    catastrophic cancellation that raw far-from-origin coordinates cause.
    """
    c = c - c.mean(axis=0)
    x, y = c[:, 0], c[:, 1]
    x1, y1 = np.roll(x, -1), np.roll(y, -1)
    cross = x * y1 - x1 * y
    area = 0.5 * float(cross.sum())
    cx = float(((x + x1) * cross).sum()) / (6.0 * area)
    cy = float(((y + y1) * cross).sum()) / (6.0 * area)
    ixx = float(((y * y + y * y1 + y1 * y1) * cross).sum()) / 12.0
    iyy = float(((x * x + x * x1 + x1 * x1) * cross).sum()) / 12.0
    ixy = float(((x * y1 + 2.0 * x * y + 2.0 * x1 * y1 + x1 * y) * cross).sum()) / 24.0
    # central moments per unit area = coordinate variances of the region
    var_x = iyy / area - cx * cx
    var_y = ixx / area - cy * cy
    cov = ixy / area - cx * cy
    return area, var_x, var_y, cov


def morphology_features(contour, nucleus_id=None):
    """Eight shape values from a simple CCW polygon.

    Order: area um^2, perimeter um, circularity, eccentricity, solidity,
    extent, major axis um, minor axis um. Axes and eccentricity come from the
    second central moments of the polygon region (the ellipse with matching
    moments), so they are closed-form and deterministic.
    """
    c = np.asarray(contour, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 3 or c.shape[1] != 2:
        raise FeatureError(f"contour must be (V>=3, 2), got {c.shape} (nucleus {nucleus_id})")
    c = c - c.mean(axis=0)  # local frame: keeps every feature translation-invariant at fp level
    area_px = polygon_area(c)
    if area_px <= 1e-12:
        raise FeatureError(f"degenerate contour with non-positive area (nucleus {nucleus_id})")

    edges = np.diff(np.vstack([c, c[:1]]), axis=0)
    perimeter_px = float(np.sqrt((edges ** 2).sum(axis=1)).sum())
    circularity = 4.0 * np.pi * area_px / (perimeter_px * perimeter_px)

    _, var_x, var_y, cov = _polygon_moments(c)
    half_tr = 0.5 * (var_x + var_y)
    disc = np.sqrt(max(0.25 * (var_x - var_y) ** 2 + cov * cov, 0.0))
    lam1 = half_tr + disc
    lam2 = max(half_tr - disc, 0.0)
    major_px = 4.0 * np.sqrt(lam1)
    minor_px = 4.0 * np.sqrt(lam2)
    eccentricity = np.sqrt(max(1.0 - lam2 / lam1, 0.0))

    try:
        hull_area = float(ConvexHull(c).volume)
    except QhullError as exc:
        raise FeatureError(f"contour is degenerate for hull computation (nucleus {nucleus_id})") from exc
    solidity = min(area_px / hull_area, 1.0)

    spans = c.max(axis=0) - c.min(axis=0)
    extent = area_px / float(spans[0] * spans[1])

    s = MICRONS_PER_PIXEL
    return np.array([
        area_px * s * s,
        perimeter_px * s,
        circularity,
        eccentricity,
        solidity,
        extent,
        major_px * s,
        minor_px * s,
    ])


def glcm(tile, levels=DEFAULT_GLCM_LEVELS, offsets=DEFAULT_GLCM_OFFSETS):
    """Pooled, symmetrized, normalized co-occurrence matrix of a gray tile.

    Intensities are quantized to ``levels`` uniform bins over the tile's own
    value range (a constant tile maps to bin 0). Pairs are accumulated over
    every offset in both orders, then the matrix is normalized to sum 1.
    """
    t = np.asarray(tile)
    if t.ndim != 2 or t.shape[0] < 2 or t.shape[1] < 2:
        raise FeatureError(f"tile must be at least 2x2, got shape {t.shape}")
    if levels < 2:
        raise FeatureError("glcm needs at least 2 gray levels")
    rows, cols = t.shape
    for dr, dc in offsets:
        if abs(dr) >= rows or abs(dc) >= cols:
            raise FeatureError(f"tile of shape {t.shape} is smaller than offset ({dr},{dc}) reach")

    t = t.astype(np.int64)
    vmin = int(t.min())
    span = int(t.max()) - vmin + 1
    q = ((t - vmin) * levels) // span  # exact integer binning into 0..levels-1

    counts = np.zeros((levels, levels), dtype=np.float64)
    for dr, dc in offsets:
        rs = slice(0, rows - dr) if dr >= 0 else slice(-dr, rows)
        re = slice(dr, rows) if dr >= 0 else slice(0, rows + dr)
        cs = slice(0, cols - dc) if dc >= 0 else slice(-dc, cols)
        ce = slice(dc, cols) if dc >= 0 else slice(0, cols + dc)
        a = q[rs, cs].ravel()
        b = q[re, ce].ravel()
        np.add.at(counts, (a, b), 1.0)
        np.add.at(counts, (b, a), 1.0)
    return counts / counts.sum()


def glcm_stats(P):
    """Contrast, energy, homogeneity, correlation, entropy of a normalized GLCM."""
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    i, j = np.indices(P.shape)
    contrast = float((P * (i - j) ** 2).sum())
    energy = float((P * P).sum())
    homogeneity = float((P / (1.0 + np.abs(i - j))).sum())

    levels = np.arange(n, dtype=np.float64)
    pi = P.sum(axis=1)
    pj = P.sum(axis=0)
    mu_i = float(levels @ pi)
    mu_j = float(levels @ pj)
    si = np.sqrt(float(((levels - mu_i) ** 2) @ pi))
    sj = np.sqrt(float(((levels - mu_j) ** 2) @ pj))
    if si > 0.0 and sj > 0.0:
        correlation = float((P * np.outer(levels - mu_i, levels - mu_j)).sum()) / (si * sj)
    else:
        correlation = 0.0

    nz = P[P > 0.0]
    entropy = float(-(nz * np.log(nz)).sum())
    return np.array([contrast, energy, homogeneity, correlation, entropy])


def topology_features(target, nuclei, radius_um=DEFAULT_NEIGHBOR_RADIUS_UM):
    """Neighbor count, mean neighbor distance (um), and local density.

    Neighbors are other nuclei with centroid distance strictly below
    ``radius_um``. With no neighbors the mean distance falls back to the
    radius itself. Density is neighbors per 10^4 um^2 of the search disk.
    """
    tx, ty = target.centroid
    dists = []
    for other in nuclei:
        if other.id == target.id:
            continue
        dx = (other.centroid[0] - tx) * MICRONS_PER_PIXEL
        dy = (other.centroid[1] - ty) * MICRONS_PER_PIXEL
        d = np.hypot(dx, dy)
        if d < radius_um:
            dists.append(d)
    count = len(dists)
    mean_dist = float(np.mean(dists)) if count else float(radius_um)
    density = count / (np.pi * radius_um * radius_um) * 1e4
    return np.array([float(count), mean_dist, density])


def class_onehot(label):
    if label == "necrosis":
        raise FilteredClassError("necrotic nuclei are excluded from feature extraction")
    if label not in ONEHOT_CLASSES:
        raise FeatureError(f"unknown nucleus class {label!r}")
    vec = np.zeros(len(ONEHOT_CLASSES))
    vec[ONEHOT_CLASSES.index(label)] = 1.0
    return vec


def filter_nuclei(nuclei):
    """Drop necrotic nuclei; the four remaining classes carry the features."""
    return [n for n in nuclei if n.class_label != "necrosis"]


def nucleus_feature_vector(nucleus, context, radius_um=DEFAULT_NEIGHBOR_RADIUS_UM,
                           levels=DEFAULT_GLCM_LEVELS, offsets=DEFAULT_GLCM_OFFSETS):
    """Raw (pre-standardization) 20-value row: morphology, texture, topology, one-hot.

    ``context`` is the nucleus's own patch after necrosis filtering; topology
    is measured against it. Per-slide z-scoring of the 16 numeric columns
    happens in :func:`slide_feature_matrices`.
    """
    onehot = class_onehot(nucleus.class_label)
    try:
        morph = morphology_features(nucleus.contour, nucleus_id=nucleus.id)
        texture = glcm_stats(glcm(nucleus.intensity_tile, levels=levels, offsets=offsets))
    except FeatureError as exc:
        raise FeatureError(f"nucleus {nucleus.id}: {exc}") from exc
    topo = topology_features(nucleus, context, radius_um=radius_um)
    return np.concatenate([morph, texture, topo, onehot])


def standardize_columns(rows):
    """Z-score the 16 numeric columns; constant columns map to 0.

    A column whose spread is below float64 rounding noise for its magnitude
    counts as constant, otherwise the 1/sd scaling would just amplify
    round-off into the standardized values.
    """
    out = rows.copy()
    num = out[:, :NUMERIC_DIM]
    mu = num.mean(axis=0)
    sd = num.std(axis=0)
    floor = 1e-9 * np.maximum(1.0, np.abs(mu))
    scale = np.where(sd > floor, 1.0 / np.where(sd > floor, sd, 1.0), 0.0)
    out[:, :NUMERIC_DIM] = (num - mu) * scale
    return out


def slide_feature_matrices(patches, radius_um=DEFAULT_NEIGHBOR_RADIUS_UM,
                           levels=DEFAULT_GLCM_LEVELS, offsets=DEFAULT_GLCM_OFFSETS):
    """Per-patch standardized feature matrices for one slide.

    ``patches`` is a list of nucleus lists (one per patch). Necrosis is
    filtered per patch, raw rows are computed with patch-local topology
    context, and the 16 numeric columns are z-scored jointly across the whole
    slide (per-slide, not per-cohort, so cross-validation folds cannot leak
    statistics into each other). Returns one (n_i, 20) array per patch;
    empty patches yield (0, 20).
    """
    kept = [filter_nuclei(p) for p in patches]
    rows = []
    for patch in kept:
        for n in patch:
            rows.append(nucleus_feature_vector(n, patch, radius_um=radius_um,
                                               levels=levels, offsets=offsets))
    if rows:
        stacked = standardize_columns(np.vstack(rows))
    else:
        stacked = np.zeros((0, FEATURE_DIM))
    out = []
    at = 0
    for patch in kept:
        out.append(stacked[at:at + len(patch)].copy())
        at += len(patch)
    return out
