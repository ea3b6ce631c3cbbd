"""Cross-entropy loss and AdamW with decoupled weight decay.

Training defaults follow the published recipe: learning rate 2e-5, weight
decay 1e-3, batch size 10. The moment hyperparameters (0.9, 0.999) and eps
1e-8 are the usual Adam defaults and are recorded in run manifests.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


class OptimizerError(ValueError):
    pass


def cross_entropy(logits, label):
    """-log softmax(logits)[label] for a (1, C) logits tensor; differentiable.

    Computed as logsumexp(shifted) - shifted[label] with a constant max shift,
    so it never overflows and stays exact for extreme margins.
    """
    if logits.data.ndim != 2 or logits.data.shape[0] != 1:
        raise OptimizerError(f"expected (1, C) logits, got {logits.data.shape}")
    c = logits.data.shape[1]
    if not (0 <= label < c):
        raise OptimizerError(f"label {label} out of range for {c} classes")
    shifted = logits - T.constant(logits.data.max())
    lse = T.log(T.exp(shifted).sum())
    picked = T.narrow(shifted, 1, int(label), 1).sum()
    return lse - picked


class AdamW:
    """Decoupled weight decay: shrink the weight directly, then take the
    bias-corrected Adam step. With weight_decay=0 this is exactly plain Adam.
    """

    def __init__(self, params, lr=2e-5, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-3):
        if lr <= 0:
            raise OptimizerError("learning rate must be positive")
        self.params = dict(params)  # name -> Tensor
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise OptimizerError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
