"""Loss and optimizer against hand-stepped scalar oracles."""

import numpy as np
import pytest

from slidegeom import tensor as T
from slidegeom.optim import AdamW, OptimizerError, cross_entropy


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(T.constant(np.zeros((1, 3))), 0)
        assert loss.item() == pytest.approx(np.log(3.0), abs=1e-12)

    def test_large_margin_near_zero(self):
        logits = np.array([[30.0, 0.0, 0.0]])
        assert cross_entropy(T.constant(logits), 0).item() < 1e-9

    def test_against_direct_formula(self):
        logits = np.array([[1.0, 2.0, 3.0]])
        probs = np.exp(logits) / np.exp(logits).sum()
        expect = -np.log(probs[0, 0])
        got = cross_entropy(T.constant(logits), 0).item()
        assert got == pytest.approx(expect, abs=1e-12)

    def test_invalid_label(self):
        with pytest.raises(OptimizerError, match="label"):
            cross_entropy(T.constant(np.zeros((1, 3))), 3)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        z = T.parameter(rng.normal(size=(1, 4)))
        report = T.grad_check(lambda z: cross_entropy(z, 2), [z])
        assert report.passed, str(report)


def scalar_adamw_oracle(w0, grads, lr, beta1, beta2, eps, wd):
    """Independent single-weight recurrence."""
    w, m, v = w0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        w = w * (1 - lr * wd) - lr * mhat / (np.sqrt(vhat) + eps)
    return w


class TestAdamW:
    def _single(self, w0, lr=0.01, wd=0.1):
        p = T.parameter(np.array([[w0]]))
        opt = AdamW({"w": p}, lr=lr, weight_decay=wd)
        return p, opt

    def test_zero_gradient_pure_decay(self):
        p, opt = self._single(2.0, lr=0.01, wd=0.1)
        p.grad = np.zeros((1, 1))
        opt.step()
        assert p.data[0, 0] == pytest.approx(2.0 * (1 - 0.01 * 0.1), abs=1e-15)

    def test_constant_gradient_step_approaches_lr_sign(self):
        p, opt = self._single(0.0, lr=0.01, wd=0.0)
        for _ in range(200):
            before = p.data[0, 0]
            p.grad = np.array([[0.37]])
            opt.step()
        step = before - p.data[0, 0]
        assert step == pytest.approx(0.01, rel=1e-3)

    def test_three_step_trajectory_matches_oracle(self):
        rng = np.random.default_rng(9)
        grads = rng.normal(size=3)
        lr, wd = 2e-3, 1e-2
        p, opt = self._single(0.5, lr=lr, wd=wd)
        for g in grads:
            p.grad = np.array([[g]])
            opt.step()
        expect = scalar_adamw_oracle(0.5, grads, lr, 0.9, 0.999, 1e-8, wd)
        assert p.data[0, 0] == pytest.approx(expect, abs=1e-12)

    def test_zero_decay_equals_plain_adam(self):
        rng = np.random.default_rng(10)
        grads = rng.normal(size=5)
        p, opt = self._single(1.0, lr=1e-3, wd=0.0)
        for g in grads:
            p.grad = np.array([[g]])
            opt.step()
        expect = scalar_adamw_oracle(1.0, grads, 1e-3, 0.9, 0.999, 1e-8, 0.0)
        assert p.data[0, 0] == expect  # exact: same arithmetic path with wd=0

    def test_shape_mismatch_rejected(self):
        p = T.parameter(np.zeros((2, 2)))
        opt = AdamW({"w": p})
        p.grad = np.zeros((3,))
        with pytest.raises(OptimizerError, match="shape"):
            opt.step()

    def test_bad_lr_rejected(self):
        with pytest.raises(OptimizerError):
            AdamW({}, lr=0.0)

    def test_zero_grad_clears(self):
        p = T.parameter(np.ones((2,)))
        opt = AdamW({"w": p})
        p.grad = np.ones((2,))
        opt.zero_grad()
        assert p.grad is None
