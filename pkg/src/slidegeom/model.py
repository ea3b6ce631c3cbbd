"""Slide-level classifier assembled from the ablation flags.

The view stream is either the raw meso embedding or the two-view fusion
output; the geometry stream is the per-patch graph encoding. With the
guided-fusion flag set, both streams pass through the gated self/cross
attention block and the transformer classifier. Without it, available
streams are concatenated (geometry case), projected back to model width, and
pooled with a plain gated-attention bag classifier, which is also the
flags-all-off baseline. The classifier head is shared between both paths.

With geometry disabled the model never reads nuclei at all, so logits are
bitwise independent of them; this is asserted in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cellgraph, gpgf, hfa
from . import tensor as T
from .config import ABLATION_MODELS


@dataclass(frozen=True)
class AblationFlags:
    use_hfa: bool
    use_geometry: bool
    use_gpgf: bool

    def validate(self):
        if self.use_gpgf and not self.use_geometry:
            raise ValueError("guided fusion requires the geometry stream (use_gpgf implies use_geometry)")
        return self

    @classmethod
    def from_letter(cls, letter):
        try:
            return cls(*ABLATION_MODELS[letter]).validate()
        except KeyError:
            raise ValueError(f"unknown ablation model {letter!r}") from None

    def to_dict(self):
        return {"use_hfa": self.use_hfa, "use_geometry": self.use_geometry, "use_gpgf": self.use_gpgf}


@dataclass
class MILParams:
    """Gated attention pooling over the patch sequence (bag classifier)."""

    w_v: T.Tensor  # (d, hidden), tanh path
    w_u: T.Tensor  # (d, hidden), sigmoid gate path
    w_a: T.Tensor  # (hidden, 1)

    def named(self, prefix="mil"):
        return {f"{prefix}.w_v": self.w_v, f"{prefix}.w_u": self.w_u, f"{prefix}.w_a": self.w_a}


def init_linear(rng, fan_in, fan_out):
    return T.init_linear(rng, fan_in, fan_out)


def mil_attention(seq, params):
    """Returns (pooled (1, d), attention weights (N,) as numpy)."""
    gate = T.tanh(seq @ params.w_v) * T.sigmoid(seq @ params.w_u)
    scores = gate @ params.w_a                    # (N, 1)
    alpha = T.softmax(scores, axis=0)
    pooled = alpha.T @ seq
    return pooled, alpha.data.reshape(-1).copy()


class SubtypeModel:
    """Parameter container plus the flag-dependent forward pass."""

    def __init__(self, config, flags, rng):
        flags.validate()
        self.config = config
        self.flags = flags
        d = config.d
        self.hfa_params = hfa.init_hfa(rng, d, token_hidden=config.token_hidden) if flags.use_hfa else None
        self.geo_params = (cellgraph.init_geo_encoder(rng, 20, config.gcn_hidden, d)
                           if flags.use_geometry else None)
        if flags.use_gpgf:
            self.gpgf_params = gpgf.init_gpgf(rng, d, config.heads, config.classes, config.ff_mult)
            self.mil_params = None
            self.fuse_w = self.fuse_b = None
            self.w_cls = self.b_cls = None
        else:
            self.gpgf_params = None
            bound = 1.0 / np.sqrt(d)
            self.mil_params = MILParams(
                w_v=T.parameter(rng.uniform(-bound, bound, size=(d, config.mil_hidden))),
                w_u=T.parameter(rng.uniform(-bound, bound, size=(d, config.mil_hidden))),
                w_a=T.parameter(rng.uniform(-1.0 / np.sqrt(config.mil_hidden), 1.0 / np.sqrt(config.mil_hidden),
                                            size=(config.mil_hidden, 1))),
            )
            if flags.use_geometry:
                self.fuse_w, self.fuse_b = T.init_linear(rng, 2 * d, d)
            else:
                self.fuse_w = self.fuse_b = None
            self.w_cls, self.b_cls = T.init_linear(rng, d, config.classes)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        out = {}
        if self.hfa_params is not None:
            out.update(self.hfa_params.named("hfa"))
        if self.geo_params is not None:
            out.update(self.geo_params.named("geo"))
        if self.gpgf_params is not None:
            out.update(self.gpgf_params.named("gpgf"))
        if self.mil_params is not None:
            out.update(self.mil_params.named("mil"))
        if self.fuse_w is not None:
            out["fuse.w"] = self.fuse_w
            out["fuse.b"] = self.fuse_b
        if self.w_cls is not None:
            out["cls.w"] = self.w_cls
            out["cls.b"] = self.b_cls
        return out

    def state_arrays(self):
        return {name: t.data.copy() for name, t in self.named_parameters().items()}

    def load_state(self, arrays):
        params = self.named_parameters()
        missing = set(params) ^ set(arrays)
        if missing:
            raise ValueError(f"parameter names do not match checkpoint: {sorted(missing)}")
        for name, t in params.items():
            if t.data.shape != arrays[name].shape:
                raise ValueError(f"shape mismatch for {name}: {t.data.shape} vs {arrays[name].shape}")
            t.data[...] = arrays[name]

    # -- forward ------------------------------------------------------------

    def _view_rows(self, slide):
        if self.flags.use_hfa:
            return [hfa.hfa_forward(p.macro, p.meso, self.hfa_params) for p in slide.patches]
        return [T.constant(p.meso.reshape(1, -1)) for p in slide.patches]

    def _geo_rows(self, slide):
        return [cellgraph.micro_geometry_feature(p.graph, self.geo_params, norm_adj=p.norm_adj)
                for p in slide.patches]

    def forward(self, slide, return_scores=False):
        """Logits (1, C) for one prepared slide; optionally per-patch scores.

        Scores are the attention each patch receives: the transformer layer's
        column average for its view token on the fusion path, or the bag
        attention weight otherwise.
        """
        fov_seq = T.concat(self._view_rows(slide), axis=0)
        if self.flags.use_gpgf:
            geo_seq = T.concat(self._geo_rows(slide), axis=0)
            fused = gpgf.gpgf_fuse(fov_seq, geo_seq, self.gpgf_params)
            if return_scores:
                logits, received = gpgf.trans_classify(fused, self.gpgf_params, return_attention=True)
                return logits, received[:fov_seq.shape[0]].copy()
            return gpgf.trans_classify(fused, self.gpgf_params)
        if self.flags.use_geometry:
            geo_seq = T.concat(self._geo_rows(slide), axis=0)
            seq = T.concat([fov_seq, geo_seq], axis=1) @ self.fuse_w + self.fuse_b
        else:
            seq = fov_seq
        pooled, alpha = mil_attention(seq, self.mil_params)
        logits = pooled @ self.w_cls + self.b_cls
        if return_scores:
            return logits, alpha
        return logits
