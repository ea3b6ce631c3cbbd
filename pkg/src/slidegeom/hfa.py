"""Per-patch fusion of the two field-of-view embeddings.

A patch's macro and meso embeddings are stacked as a 2-token matrix and pass
through a two-stage mixer (token axis, then channel axis, each with a
residual), a pair of gated MLP branches whose sigmoid gates weight their own
outputs, and a final linear map. With every mixer weight and bias at zero the
mixer is exactly the identity on its input: the residual path is load-bearing
and tested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

TOKENS = 2  # macro, meso


@dataclass
class MixerParams:
    # token mixing (operates on rows of f_c^T, length 2)
    ln_tok_g: Tensor
    ln_tok_b: Tensor
    w1: Tensor  # (2, token_hidden)
    b1: Tensor
    w2: Tensor  # (token_hidden, 2)
    b2: Tensor
    # channel mixing (operates on rows of length d)
    ln_ch_g: Tensor
    ln_ch_b: Tensor
    w3: Tensor  # (d, channel_hidden)
    b3: Tensor
    w4: Tensor  # (channel_hidden, d)
    b4: Tensor


@dataclass
class BranchParams:
    """Linear-ReLU-Linear-LayerNorm block used by the gated pooling."""

    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor
    ln_g: Tensor
    ln_b: Tensor


@dataclass
class HFAParams:
    mixer: MixerParams
    phi1: BranchParams
    phi2: BranchParams
    w_out: Tensor  # (d, d)
    b_out: Tensor

    def named(self, prefix="hfa"):
        m, out = self.mixer, {}
        for name, t in [("ln_tok_g", m.ln_tok_g), ("ln_tok_b", m.ln_tok_b),
                        ("w1", m.w1), ("b1", m.b1), ("w2", m.w2), ("b2", m.b2),
                        ("ln_ch_g", m.ln_ch_g), ("ln_ch_b", m.ln_ch_b),
                        ("w3", m.w3), ("b3", m.b3), ("w4", m.w4), ("b4", m.b4)]:
            out[f"{prefix}.mixer.{name}"] = t
        for bname, br in [("phi1", self.phi1), ("phi2", self.phi2)]:
            out[f"{prefix}.{bname}.w_in"] = br.w_in
            out[f"{prefix}.{bname}.b_in"] = br.b_in
            out[f"{prefix}.{bname}.w_out"] = br.w_out
            out[f"{prefix}.{bname}.b_out"] = br.b_out
            out[f"{prefix}.{bname}.ln_g"] = br.ln_g
            out[f"{prefix}.{bname}.ln_b"] = br.ln_b
        out[f"{prefix}.w_out"] = self.w_out
        out[f"{prefix}.b_out"] = self.b_out
        return out


def init_branch(rng, d):
    w_in, b_in = T.init_linear(rng, d, d)
    w_out, b_out = T.init_linear(rng, d, d)
    return BranchParams(w_in, b_in, w_out, b_out,
                        T.parameter(np.ones((1, d))), T.parameter(np.zeros((1, d))))


def init_hfa(rng, d, token_hidden=8):
    w1, b1 = T.init_linear(rng, TOKENS, token_hidden)
    w2, b2 = T.init_linear(rng, token_hidden, TOKENS)
    w3, b3 = T.init_linear(rng, d, 2 * d)
    w4, b4 = T.init_linear(rng, 2 * d, d)
    mixer = MixerParams(
        ln_tok_g=T.parameter(np.ones((1, TOKENS))), ln_tok_b=T.parameter(np.zeros((1, TOKENS))),
        w1=w1, b1=b1, w2=w2, b2=b2,
        ln_ch_g=T.parameter(np.ones((1, d))), ln_ch_b=T.parameter(np.zeros((1, d))),
        w3=w3, b3=b3, w4=w4, b4=b4,
    )
    w_out, b_out = T.init_linear(rng, d, d)
    return HFAParams(mixer, init_branch(rng, d), init_branch(rng, d), w_out, b_out)


def _theta(x, gain, bias):
    """LayerNorm over the last axis followed by the exact-CDF GELU."""
    return T.gelu(T.layernorm(x, gain, bias))


def mixer_forward(f_c, params):
    """Token mixing then channel mixing, each residual: 2xd in, 2xd out."""
    if f_c.shape != (TOKENS, params.w3.shape[0]):
        raise T.ShapeError(f"mixer expects (2, d) tokens, got {f_c.shape}")
    m = params
    t = f_c.T  # (d, 2): rows indexed by channel, token axis last
    z1 = t + (_theta(t, m.ln_tok_g, m.ln_tok_b) @ m.w1 + m.b1) @ m.w2 + m.b2
    zt = z1.T  # (2, d): back to token rows, channel axis last
    return zt + (_theta(zt, m.ln_ch_g, m.ln_ch_b) @ m.w3 + m.b3) @ m.w4 + m.b4


def _branch(z, p):
    hidden = T.relu(z @ p.w_in + p.b_in)
    return T.layernorm(hidden @ p.w_out + p.b_out, p.ln_g, p.ln_b)


def gap_forward(z, params):
    """Gated pooling of the 2 mixed tokens down to a (1, d) vector.

    Each branch gates its own output through a sigmoid, the gated branch
    outputs are summed per token, and the token axis is averaged.
    """
    u1 = _branch(z, params.phi1)
    u2 = _branch(z, params.phi2)
    combined = T.sigmoid(u1) * u1 + T.sigmoid(u2) * u2
    return combined.mean(axis=0, keepdims=True)


def hfa_forward(f_macro, f_meso, params):
    """Fuse one patch's two views into a (1, d) vector."""
    macro = f_macro if isinstance(f_macro, Tensor) else T.constant(np.asarray(f_macro).reshape(1, -1))
    meso = f_meso if isinstance(f_meso, Tensor) else T.constant(np.asarray(f_meso).reshape(1, -1))
    f_c = T.concat([macro, meso], axis=0)
    z = mixer_forward(f_c, params.mixer)
    return gap_forward(z, params) @ params.w_out + params.b_out


def hfa_forward_batch(pairs, params):
    """Patches are independent; batching is a plain loop and must match
    one-at-a-time results exactly."""
    return [hfa_forward(macro, meso, params) for macro, meso in pairs]
