"""Nucleus graph construction and its graph-convolution encoder.

Each patch's nuclei become a directed k-nearest-neighbor graph (k=8, edge
length strictly under 100 px). For the encoder the adjacency is OR-symmetrized
and given self loops, then degree-normalized; a single ReLU graph convolution
followed by mean pooling and a linear projection yields one micro-geometry
vector per patch. Patches without nuclei map to a dedicated trainable
placeholder vector so missing geometry is explicit rather than NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


class GraphError(ValueError):
    """Invalid graph construction input."""


@dataclass
class CellGraph:
    """Feature matrix, edge list, and binary adjacency over one patch's nuclei."""

    node_ids: list
    features: np.ndarray      # (n, feature_dim)
    edges: list               # directed (i, j) pairs
    adjacency: np.ndarray     # (n, n) of {0.0, 1.0}
    k: int
    threshold_px: float

    @property
    def n_nodes(self):
        return self.features.shape[0]


def knn_edges(centroids, k=8, threshold_px=100.0):
    """Directed edges from each node to its <=k nearest distinct nodes.

    Only candidates with Euclidean distance strictly below ``threshold_px``
    qualify; ties are broken by the smaller node id so construction is fully
    deterministic. Duplicate centroids are allowed (distance 0 qualifies).
    """
    if k < 1:
        raise GraphError("k must be >= 1")
    if threshold_px <= 0:
        raise GraphError("distance threshold must be positive")
    pts = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n == 0:
        return []
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    edges = []
    ids = np.arange(n)
    for i in range(n):
        mask = (dist[i] < threshold_px)
        mask[i] = False
        cand = ids[mask]
        if cand.size == 0:
            continue
        order = np.lexsort((cand, dist[i, cand]))  # by distance, then id
        for j in cand[order[:k]]:
            edges.append((i, int(j)))
    return edges


def adjacency(edges, n):
    """Binary adjacency from a directed edge list; asymmetric in general."""
    A = np.zeros((n, n), dtype=np.float64)
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise GraphError(f"edge ({i},{j}) out of range for {n} nodes")
        A[i, j] = 1.0
    return A


def build_cell_graph(nuclei, features, k=8, threshold_px=100.0):
    edges = knn_edges([n.centroid for n in nuclei], k=k, threshold_px=threshold_px)
    return CellGraph(
        node_ids=[n.id for n in nuclei],
        features=np.asarray(features, dtype=np.float64),
        edges=edges,
        adjacency=adjacency(edges, len(nuclei)),
        k=k,
        threshold_px=threshold_px,
    )


def normalized_adjacency(A):
    """D^-1/2 (sym(A) | I) D^-1/2.

    The k-NN relation is directed, so the adjacency is symmetrized by OR with
    its transpose before the usual self-loop degree normalization; every
    degree is then >= 1 and the division is always safe.
    """
    A = np.asarray(A, dtype=np.float64)
    sym = np.maximum(A, A.T)
    np.fill_diagonal(sym, 1.0)
    d = sym.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return sym * inv_sqrt[:, None] * inv_sqrt[None, :]


def gcn_forward(A, X, W, b):
    """One ReLU graph convolution: relu(norm(A) @ X @ W + b).

    ``A`` is the raw binary adjacency (numpy); ``X``, ``W`` and ``b`` are
    tensors so gradients flow to features and weights.
    """
    N = T.constant(normalized_adjacency(A))
    return T.relu((N @ X) @ W + b)


@dataclass
class GeoEncoderParams:
    """GCN weights plus the projection to model width and the empty-patch row."""

    w_gcn: T.Tensor    # (feature_dim, hidden)
    b_gcn: T.Tensor    # (1, hidden)
    w_proj: T.Tensor   # (hidden, d)
    b_proj: T.Tensor   # (1, d)
    placeholder: T.Tensor  # (1, d), used when a patch has no nuclei

    def named(self, prefix="geo"):
        return {
            f"{prefix}.w_gcn": self.w_gcn,
            f"{prefix}.b_gcn": self.b_gcn,
            f"{prefix}.w_proj": self.w_proj,
            f"{prefix}.b_proj": self.b_proj,
            f"{prefix}.placeholder": self.placeholder,
        }


def init_geo_encoder(rng, feature_dim, hidden, d):
    w_gcn, b_gcn = T.init_linear(rng, feature_dim, hidden)
    w_proj, b_proj = T.init_linear(rng, hidden, d)
    placeholder = T.parameter(rng.uniform(-0.1, 0.1, size=(1, d)))
    return GeoEncoderParams(w_gcn, b_gcn, w_proj, b_proj, placeholder)


def micro_geometry_feature(graph, params, norm_adj=None):
    """Encode one patch graph to a (1, d) vector.

    Mean-pools the GCN node embeddings and projects to model width. A
    zero-node graph returns the trainable placeholder row; callers can detect
    that case from ``graph.n_nodes``. ``norm_adj`` lets callers reuse a
    precomputed normalized adjacency.
    """
    if graph.n_nodes == 0:
        return params.placeholder
    N = T.constant(norm_adj if norm_adj is not None else normalized_adjacency(graph.adjacency))
    X = T.constant(graph.features)
    H = T.relu((N @ X) @ params.w_gcn + params.b_gcn)
    pooled = H.mean(axis=0, keepdims=True)
    return pooled @ params.w_proj + params.b_proj
