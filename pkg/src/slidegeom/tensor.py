"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are numpy arrays; every differentiable operation records a backward
closure, and a single ``backward()`` call on a scalar loss fills ``grad`` on
every reachable node. Tensors are treated as immutable after creation: each
forward pass builds a fresh graph, which keeps the engine simple and makes
repeated passes bit-for-bit deterministic. Graphs for different slides are
independent and may be evaluated concurrently; a single graph is meant to be
walked by one thread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """Input values lie outside an operation's numeric domain."""


class GradUsageError(RuntimeError):
    """Autodiff misuse: non-scalar backward, or backward run twice on one graph."""


_finite_checks = False


def set_finite_checks(enabled):
    """When enabled, every new forward value is asserted finite (test aid)."""
    global _finite_checks
    _finite_checks = bool(enabled)


class Tensor:
    """A node of the computation graph: value, parents, backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._scalar_error()

    def _scalar_error(self):
        raise GradUsageError(f"expected a scalar tensor, got shape {self.data.shape}")

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Visits each node exactly once in reverse topological order and
        accumulates into ``grad`` (so leaves shared by several losses sum
        their contributions). Running backward twice on the same loss is an
        error: rebuild the graph instead.
        """
        if self.data.size != 1:
            raise GradUsageError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._done:
            raise GradUsageError("backward already ran on this graph; build a fresh forward pass first")
        self._done = True

        # Iterative postorder; nodes are marked visited on expansion (not on
        # push) so shared subgraphs still land before every consumer.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return mul(self, constant(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def constant(data):
    return Tensor(data, requires_grad=False)


def parameter(data):
    return Tensor(data, requires_grad=True)


def init_linear(rng, fan_in, fan_out):
    """Weight (fan_in, fan_out) and bias (1, fan_out), uniform in +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    w = parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    b = parameter(rng.uniform(-bound, bound, size=(1, fan_out)))
    return w, b


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    if _finite_checks and not np.all(np.isfinite(data)):
        raise DomainError(f"non-finite values produced by {op}")
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward, "add")


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward, "mul")


def div(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out_data / b.data, b.data.shape))

    return _node(out_data, (a, b), backward, "div")


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul needs (m,k)@(k,n); got {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(out_data, (a, b), backward, "matmul")


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a rank-2 tensor, got shape {a.data.shape}")
    out_data = a.data.T.copy()

    def backward(g):
        a._accumulate(g.T)

    return _node(out_data, (a,), backward, "transpose")


# -- elementwise nonlinearities ------------------------------------------------


def relu(a):
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0.0))

    return _node(out_data, (a,), backward, "relu")


def gelu(a):
    """Exact Gaussian-CDF form: x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = a.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        a._accumulate(g * (cdf + a.data * pdf))

    return _node(out_data, (a,), backward, "gelu")


def sigmoid(a):
    # exp(-|x|) never overflows; both branches share it
    ex = np.exp(-np.abs(a.data))
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward, "sigmoid")


def tanh(a):
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backward, "tanh")


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _node(out_data, (a,), backward, "exp")


def log(a):
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive entries")
    out_data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _node(out_data, (a,), backward, "log")


def sqrt(a):
    if np.any(a.data < 0.0):
        raise DomainError("sqrt requires nonnegative entries")
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return _node(out_data, (a,), backward, "sqrt")


_ELEMENTWISE = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid, "exp": exp, "log": log, "tanh": tanh}


def elementwise(op, x):
    """Dispatch one of the named per-element operations."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; choose from {sorted(_ELEMENTWISE)}") from None
    return fn(x)


# -- reductions and shape -------------------------------------------------------


def tensor_sum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _node(out_data, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * constant(1.0 / n)


def softmax(a, axis=-1):
    """Numerically stable softmax; each slice along ``axis`` sums to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - inner))

    return _node(out_data, (a,), backward, "softmax")


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + s)
                t._accumulate(g[tuple(idx)])
            offset += s

    return _node(out_data, tuple(tensors), backward, "concat")


def narrow(a, axis, start, size):
    """Contiguous slice of length ``size`` along ``axis``."""
    if start < 0 or start + size > a.data.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + size}) out of range for axis {axis} of shape {a.data.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + size)
    out_data = a.data[tuple(idx)].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[tuple(idx)] = g
        a._accumulate(full)

    return _node(out_data, (a,), backward, "narrow")


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale and shift.

    ``eps`` guards zero-variance rows: a constant row maps to ``bias``.
    """
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = centered / sqrt(var + constant(eps))
    return normed * gain + bias


# -- gradient verification -------------------------------------------------------

_REL_FLOOR = 1e-3  # denominators below this make the ratio an absolute error


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    checks: int

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def __str__(self):
        state = "pass" if self.passed else "FAIL"
        return f"{self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.1e}, {self.checks} partials) {state}"


def grad_check(f, inputs, h=1e-5, tol=1e-4, name="grad_check"):
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps the given tensors to a scalar Tensor and is re-evaluated from
    scratch for every probe, so it must be deterministic. Relative error uses
    a small-denominator floor so near-zero partials are judged absolutely.
    """
    inputs = list(inputs)
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    loss = f(*inputs)
    if loss.data.size != 1:
        raise GradUsageError("grad_check requires a scalar-valued function")
    loss.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    worst = 0.0
    checks = 0
    for x, ga in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*inputs).data.reshape(-1)[0])
            flat[i] = orig - h
            fm = float(f(*inputs).data.reshape(-1)[0])
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(gflat[i]), abs(numeric), _REL_FLOOR)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
            checks += 1
    return GradCheckReport(name=name, max_rel_error=worst, tolerance=tol, checks=checks)
