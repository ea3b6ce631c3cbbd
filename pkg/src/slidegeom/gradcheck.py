"""Finite-difference verification of every differentiable operation.

Each named check compares reverse-mode gradients against central differences
(h=1e-5) on small fixed-seed instances, including the complete
graph-encoding -> view-fusion -> guided-fusion -> cross-entropy pipeline at
width 8. The suite backs both the ``gradcheck`` CLI subcommand and the
acceptance test, so it is deliberately deterministic.
"""

from __future__ import annotations

import numpy as np

from . import cellgraph, gpgf, hfa
from . import tensor as T
from .model import MILParams, mil_attention
from .optim import cross_entropy
from .tensor import grad_check


def _randn(rng, *shape, scale=1.0, kink_guard=0.0):
    x = rng.normal(size=shape) * scale
    if kink_guard:
        # keep entries away from non-differentiable points for finite differences
        x = np.where(np.abs(x) < kink_guard, x + np.sign(x + 1e-12) * kink_guard, x)
    return x


def _params_list(named):
    return [t for _, t in sorted(named.items())]


def run_suite(h=1e-5, tol=1e-4, seed=123):
    """All gradient checks; returns a list of GradCheckReport."""
    rng = np.random.default_rng(seed)
    reports = []

    def check(name, f, inputs):
        reports.append(grad_check(f, inputs, h=h, tol=tol, name=name))

    # primitive operations
    a = T.parameter(_randn(rng, 3, 4))
    b = T.parameter(_randn(rng, 4, 2))
    check("matmul", lambda a, b: (a @ b).sum(), [a, b])

    x = T.parameter(_randn(rng, 3, 4))
    bias = T.parameter(_randn(rng, 1, 4))
    check("add broadcast", lambda x, b: (x + b).sum(), [x, bias])

    x = T.parameter(_randn(rng, 3, 4))
    y = T.parameter(_randn(rng, 3, 4))
    check("mul", lambda x, y: (x * y).sum(), [x, y])
    x = T.parameter(_randn(rng, 3, 4))
    y = T.parameter(_randn(rng, 3, 4, kink_guard=0.2))
    check("div", lambda x, y: (x / y).sum(), [x, y])

    check("relu", lambda x: T.relu(x).sum(), [T.parameter(_randn(rng, 4, 4, kink_guard=1e-2))])
    check("gelu", lambda x: T.gelu(x).sum(), [T.parameter(_randn(rng, 4, 4))])
    check("sigmoid", lambda x: T.sigmoid(x).sum(), [T.parameter(_randn(rng, 4, 4))])
    check("tanh", lambda x: T.tanh(x).sum(), [T.parameter(_randn(rng, 4, 4))])
    check("exp", lambda x: T.exp(x).sum(), [T.parameter(_randn(rng, 4, 4))])
    check("log", lambda x: T.log(x).sum(), [T.parameter(np.abs(_randn(rng, 4, 4)) + 0.5)])
    check("sqrt", lambda x: T.sqrt(x).sum(), [T.parameter(np.abs(_randn(rng, 4, 4)) + 0.5)])

    probe = T.constant(_randn(rng, 3, 5))  # row weights; a bare sum of softmax rows is constant
    check("softmax", lambda x: (T.softmax(x, axis=1) * probe).sum(), [T.parameter(_randn(rng, 3, 5))])

    g = T.parameter(np.abs(_randn(rng, 1, 6)) + 0.5)
    bb = T.parameter(_randn(rng, 1, 6))
    ln_probe = T.constant(_randn(rng, 3, 6))
    check("layernorm", lambda x, g, b: (T.layernorm(x, g, b) * ln_probe).sum(),
          [T.parameter(_randn(rng, 3, 6)), g, bb])

    check("shape ops", lambda x: (T.concat([T.narrow(x, 1, 0, 2), x.T.T], axis=1).mean(axis=0, keepdims=True)).sum(),
          [T.parameter(_randn(rng, 3, 4))])

    check("cross entropy", lambda z: cross_entropy(z, 1), [T.parameter(_randn(rng, 1, 4))])

    # graph encoder
    d = 8
    A = (rng.uniform(size=(5, 5)) < 0.4).astype(float)
    np.fill_diagonal(A, 0.0)
    X = T.parameter(_randn(rng, 5, 20, scale=0.5))
    W = T.parameter(_randn(rng, 20, 6, scale=0.3))
    bg = T.parameter(_randn(rng, 1, 6, scale=0.1))
    check("graph convolution", lambda X, W, bg: cellgraph.gcn_forward(A, X, W, bg).sum(), [X, W, bg])

    # view-fusion block
    hp = hfa.init_hfa(np.random.default_rng(seed + 1), d)
    macro = T.parameter(_randn(rng, 1, d, scale=0.5))
    meso = T.parameter(_randn(rng, 1, d, scale=0.5))
    check("view mixer", lambda fc, *ps: hfa.mixer_forward(fc, hp.mixer).sum(),
          [T.parameter(_randn(rng, 2, d, scale=0.5))] + _params_list(hp.named()))
    check("gated pooling", lambda z, *ps: hfa.gap_forward(z, hp).sum(),
          [T.parameter(_randn(rng, 2, d, scale=0.5))] + _params_list(hp.named()))
    check("view fusion full", lambda m, s, *ps: hfa.hfa_forward(m, s, hp).sum(),
          [macro, meso] + _params_list(hp.named()))

    # guided fusion block
    gp = gpgf.init_gpgf(np.random.default_rng(seed + 2), d, heads=2, classes=3)
    q = T.parameter(_randn(rng, 3, d, scale=0.5))
    k = T.parameter(_randn(rng, 2, d, scale=0.5))
    v = T.parameter(_randn(rng, 2, d, scale=0.5))
    check("attention", lambda q, k, v, *ps: gpgf.mha(q, k, v, gp.mha_fov).sum(),
          [q, k, v] + _params_list(gp.mha_fov.named("m")))
    fov = T.parameter(_randn(rng, 2, d, scale=0.5))
    geo = T.parameter(_randn(rng, 2, d, scale=0.5))
    check("guided fusion", lambda f, g2, *ps: gpgf.gpgf_fuse(f, g2, gp).sum(),
          [fov, geo] + _params_list(gp.named()))
    fused = T.parameter(_randn(rng, 4, d, scale=0.5))
    check("transformer classify", lambda f, *ps: cross_entropy(gpgf.trans_classify(f, gp), 0),
          [fused] + _params_list(gp.named()))

    # bag-attention path
    mil = MILParams(w_v=T.parameter(_randn(rng, d, 6, scale=0.4)),
                    w_u=T.parameter(_randn(rng, d, 6, scale=0.4)),
                    w_a=T.parameter(_randn(rng, 6, 1, scale=0.4)))
    seq = T.parameter(_randn(rng, 4, d, scale=0.5))
    check("bag attention", lambda s, *ps: mil_attention(s, mil)[0].sum(),
          [seq] + _params_list(mil.named()))

    # full pipeline: graphs -> view fusion -> guided fusion -> cross entropy
    reports.append(full_pipeline_check(h=h, tol=tol, seed=seed + 3))
    return reports


def full_pipeline_check(h=1e-5, tol=1e-4, seed=99, n_patches=2, nuclei_per_patch=12, d=8):
    """Gradient check of the complete model at width 8 on a 2-patch slide."""
    rng = np.random.default_rng(seed)
    hp = hfa.init_hfa(np.random.default_rng(seed + 10), d)
    geo_p = cellgraph.init_geo_encoder(np.random.default_rng(seed + 11), 20, 6, d)
    gp = gpgf.init_gpgf(np.random.default_rng(seed + 12), d, heads=2, classes=3)

    adj = []
    for _ in range(n_patches):
        pts = rng.uniform(0, 300, size=(nuclei_per_patch, 2))
        edges = cellgraph.knn_edges(pts, k=4, threshold_px=120.0)
        adj.append(cellgraph.adjacency(edges, nuclei_per_patch))

    macros = [T.parameter(rng.normal(size=(1, d)) * 0.5) for _ in range(n_patches)]
    mesos = [T.parameter(rng.normal(size=(1, d)) * 0.5) for _ in range(n_patches)]
    feats = [T.parameter(rng.normal(size=(nuclei_per_patch, 20)) * 0.3) for _ in range(n_patches)]
    params = _params_list({**hp.named(), **geo_p.named(), **gp.named()})

    def f(*args):
        fov_rows = [hfa.hfa_forward(m, s, hp) for m, s in zip(macros, mesos)]
        geo_rows = []
        for A, X in zip(adj, feats):
            H = cellgraph.gcn_forward(A, X, geo_p.w_gcn, geo_p.b_gcn)
            geo_rows.append(H.mean(axis=0, keepdims=True) @ geo_p.w_proj + geo_p.b_proj)
        fused = gpgf.gpgf_fuse(T.concat(fov_rows, axis=0), T.concat(geo_rows, axis=0), gp)
        return cross_entropy(gpgf.trans_classify(fused, gp), 1)

    return grad_check(f, macros + mesos + feats + params, h=h, tol=tol, name="full pipeline")
