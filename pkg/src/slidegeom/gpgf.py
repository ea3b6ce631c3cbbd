"""Gated self/cross attention fusion of the view sequence and geometry sequence.

Both per-slide sequences (N patches x d) attend within themselves and are
queried by a learned projection of the other modality; a per-token sigmoid
gate blends self and cross results. The blended sequences are concatenated
into 2N tokens and passed through a pre-norm transformer layer, mean-pooled,
and classified. No positional encoding is used anywhere, so slide logits are
invariant to patch order, which is part of the contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ModelError(ValueError):
    """Shape or configuration violation inside the fusion network."""


@dataclass
class MHAParams:
    heads: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def named(self, prefix):
        return {f"{prefix}.{n}": t for n, t in [
            ("wq", self.wq), ("bq", self.bq), ("wk", self.wk), ("bk", self.bk),
            ("wv", self.wv), ("bv", self.bv), ("wo", self.wo), ("bo", self.bo)]}


@dataclass
class TransLayerParams:
    mha: MHAParams
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor

    def named(self, prefix):
        out = self.mha.named(f"{prefix}.mha")
        out.update({f"{prefix}.ln1_g": self.ln1_g, f"{prefix}.ln1_b": self.ln1_b,
                    f"{prefix}.ln2_g": self.ln2_g, f"{prefix}.ln2_b": self.ln2_b,
                    f"{prefix}.w_ff1": self.w_ff1, f"{prefix}.b_ff1": self.b_ff1,
                    f"{prefix}.w_ff2": self.w_ff2, f"{prefix}.b_ff2": self.b_ff2})
        return out


@dataclass
class GPGFParams:
    mha_fov: MHAParams
    mha_geo: MHAParams
    w_g2f: Tensor   # geometry -> view query projection
    b_g2f: Tensor
    w_f2g: Tensor   # view -> geometry query projection
    b_f2g: Tensor
    w_gate_fov: Tensor  # (2d, 1)
    b_gate_fov: Tensor
    w_gate_geo: Tensor
    b_gate_geo: Tensor
    trans: TransLayerParams
    w_cls: Tensor   # (d, classes)
    b_cls: Tensor

    def named(self, prefix="gpgf"):
        out = self.mha_fov.named(f"{prefix}.mha_fov")
        out.update(self.mha_geo.named(f"{prefix}.mha_geo"))
        out.update({f"{prefix}.w_g2f": self.w_g2f, f"{prefix}.b_g2f": self.b_g2f,
                    f"{prefix}.w_f2g": self.w_f2g, f"{prefix}.b_f2g": self.b_f2g,
                    f"{prefix}.w_gate_fov": self.w_gate_fov, f"{prefix}.b_gate_fov": self.b_gate_fov,
                    f"{prefix}.w_gate_geo": self.w_gate_geo, f"{prefix}.b_gate_geo": self.b_gate_geo})
        out.update(self.trans.named(f"{prefix}.trans"))
        out[f"{prefix}.w_cls"] = self.w_cls
        out[f"{prefix}.b_cls"] = self.b_cls
        return out


def init_mha(rng, d, heads):
    if d % heads != 0:
        raise ModelError(f"model width {d} is not divisible by {heads} heads")
    wq, bq = T.init_linear(rng, d, d)
    wk, bk = T.init_linear(rng, d, d)
    wv, bv = T.init_linear(rng, d, d)
    wo, bo = T.init_linear(rng, d, d)
    return MHAParams(heads, wq, bq, wk, bk, wv, bv, wo, bo)


def init_translayer(rng, d, heads, ff_mult=2):
    w_ff1, b_ff1 = T.init_linear(rng, d, ff_mult * d)
    w_ff2, b_ff2 = T.init_linear(rng, ff_mult * d, d)
    return TransLayerParams(
        mha=init_mha(rng, d, heads),
        ln1_g=T.parameter(np.ones((1, d))), ln1_b=T.parameter(np.zeros((1, d))),
        ln2_g=T.parameter(np.ones((1, d))), ln2_b=T.parameter(np.zeros((1, d))),
        w_ff1=w_ff1, b_ff1=b_ff1, w_ff2=w_ff2, b_ff2=b_ff2,
    )


def init_gpgf(rng, d, heads, classes, ff_mult=2):
    mha_fov = init_mha(rng, d, heads)
    mha_geo = init_mha(rng, d, heads)
    w_g2f, b_g2f = T.init_linear(rng, d, d)
    w_f2g, b_f2g = T.init_linear(rng, d, d)
    w_gate_fov, b_gate_fov = T.init_linear(rng, 2 * d, 1)
    w_gate_geo, b_gate_geo = T.init_linear(rng, 2 * d, 1)
    trans = init_translayer(rng, d, heads, ff_mult)
    w_cls, b_cls = T.init_linear(rng, d, classes)
    return GPGFParams(mha_fov, mha_geo, w_g2f, b_g2f, w_f2g, b_f2g,
                      w_gate_fov, b_gate_fov, w_gate_geo, b_gate_geo,
                      trans, w_cls, b_cls)


def mha(q, k, v, params, return_attention=False):
    """Scaled dot-product multi-head attention.

    ``q`` is (N_q, d); ``k`` and ``v`` are (N_k, d). Per head the scale is
    1/sqrt(d/heads); softmax rows sum to 1. Returns (N_q, d), plus the
    per-head attention matrices as numpy arrays when requested.
    """
    d = q.shape[1]
    h = params.heads
    if d % h != 0:
        raise ModelError(f"width {d} not divisible by {h} heads")
    if k.shape != v.shape or k.shape[1] != d:
        raise ModelError(f"mha shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    dh = d // h
    scale = 1.0 / np.sqrt(dh)

    Q = q @ params.wq + params.bq
    K = k @ params.wk + params.bk
    V = v @ params.wv + params.bv

    outs = []
    attns = []
    for i in range(h):
        Qh = T.narrow(Q, 1, i * dh, dh)
        Kh = T.narrow(K, 1, i * dh, dh)
        Vh = T.narrow(V, 1, i * dh, dh)
        A = T.softmax((Qh @ Kh.T) * scale, axis=1)
        if return_attention:
            attns.append(A.data.copy())
        outs.append(A @ Vh)
    out = T.concat(outs, axis=1) @ params.wo + params.bo
    if return_attention:
        return out, attns
    return out


def gpgf_fuse(fov_seq, geo_seq, params):
    """Blend self- and cross-attended sequences with per-token sigmoid gates.

    Returns the (2N, d) concatenation of the blended view tokens and blended
    geometry tokens. A gate of exactly 1 reproduces the self branch, 0 the
    cross branch.
    """
    n = fov_seq.shape[0]
    if n == 0 or geo_seq.shape[0] != n:
        raise ModelError(f"need matching non-empty sequences, got {fov_seq.shape} and {geo_seq.shape}")

    fov_self = mha(fov_seq, fov_seq, fov_seq, params.mha_fov)
    fov_cross = mha(geo_seq @ params.w_g2f + params.b_g2f, fov_seq, fov_seq, params.mha_fov)
    geo_self = mha(geo_seq, geo_seq, geo_seq, params.mha_geo)
    geo_cross = mha(fov_seq @ params.w_f2g + params.b_f2g, geo_seq, geo_seq, params.mha_geo)

    a_fov = T.sigmoid(T.concat([fov_self, fov_cross], axis=1) @ params.w_gate_fov + params.b_gate_fov)
    a_geo = T.sigmoid(T.concat([geo_self, geo_cross], axis=1) @ params.w_gate_geo + params.b_gate_geo)

    fov_mix = a_fov * fov_self + (T.constant(1.0) - a_fov) * fov_cross
    geo_mix = a_geo * geo_self + (T.constant(1.0) - a_geo) * geo_cross
    return T.concat([fov_mix, geo_mix], axis=0)


def trans_classify(fused, params, return_attention=False):
    """Pre-norm transformer layer over the fused tokens, then mean-pool and classify.

    ``params`` is the full :class:`GPGFParams`. When ``return_attention`` is
    set, also returns the attention each token received, averaged over heads
    and query positions: a length-2N numpy vector whose first N entries line
    up with the slide's patches.
    """
    if fused.shape[0] < 2:
        raise ModelError(f"transformer layer expects at least 2 tokens, got {fused.shape[0]}")
    p = params.trans
    normed = T.layernorm(fused, p.ln1_g, p.ln1_b)
    att_out, attn_mats = mha(normed, normed, normed, p.mha, return_attention=True)
    x = fused + att_out
    h = T.layernorm(x, p.ln2_g, p.ln2_b)
    ff = T.gelu(h @ p.w_ff1 + p.b_ff1) @ p.w_ff2 + p.b_ff2
    x = x + ff
    pooled = x.mean(axis=0, keepdims=True)
    logits = pooled @ params.w_cls + params.b_cls
    if return_attention:
        received = np.mean([m.mean(axis=0) for m in attn_mats], axis=0)
        return logits, received
    return logits
