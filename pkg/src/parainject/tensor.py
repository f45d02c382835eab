"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (encoder, heads, losses) is built from the
primitives here, so the backward pass of each primitive is checked
against central finite differences in the test suite.
"""

import math

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "SpanError",
    "add",
    "sub",
    "mul",
    "matmul",
    "absolute",
    "concat",
    "stack",
    "select",
    "reshape",
    "swapaxes",
    "scale",
    "softmax",
    "layer_norm",
    "gelu",
    "dropout",
    "embedding",
    "max_pool_span",
    "mean_pool_span",
    "softmax_cross_entropy",
    "mse_loss",
    "Adam",
    "adam_step",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class SpanError(ValueError):
    """Raised when a pooling span falls outside its matrix."""


class Tensor:
    """A float64 array plus the bookkeeping needed to replay adjoints.

    The graph is recorded eagerly: each op produces a Tensor holding its
    parents and a closure that accumulates gradients into them.
    ``backward()`` traverses the recorded ops exactly once, in reverse
    topological order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        order = []
        seen = set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            order.append(node)

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t, g):
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _needs_graph(*tensors):
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data, parents, backward):
    if _needs_graph(*parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def scale(a, c):
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    c = float(c)
    out_data = a.data * c

    def backward(g):
        _accumulate(a, g * c)

    return _make(out_data, (a,), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions do not match for shapes "
            f"{a.data.shape} and {b.data.shape}"
        )
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def absolute(a):
    a = _as_tensor(a)
    out_data = np.abs(a.data)

    def backward(g):
        _accumulate(a, g * np.sign(a.data))

    return _make(out_data, (a,), backward)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _make(out_data, tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(out_data, tuple(tensors), backward)


def select(a, index, axis=0):
    """Pick one slice along ``axis`` (e.g. one row of a batch)."""
    a = _as_tensor(a)
    out_data = np.take(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        idx = [slice(None)] * a.data.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        _accumulate(a, full)

    return _make(out_data, (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def swapaxes(a, ax1, ax2):
    a = _as_tensor(a)
    out_data = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        _accumulate(a, np.swapaxes(g, ax1, ax2))

    return _make(out_data, (a,), backward)


def softmax(a, axis=-1):
    """Numerically stabilized softmax."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _make(out_data, (a,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got "
            f"{gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (gx_hat - m1 - xhat * m2))
        red = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=red))
        _accumulate(bias, g.sum(axis=red))

    return _make(out_data, (x, gain, bias), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = a.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        _accumulate(a, g * (cdf + a.data * pdf))

    return _make(out_data, (a,), backward)


def dropout(a, p, rng, train=True):
    """Inverted dropout: scales by 1/(1-p) at train time, identity at eval."""
    a = _as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0,1), got {p}")
    if not train or p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out_data = a.data * keep

    def backward(g):
        _accumulate(a, g * keep)

    return _make(out_data, (a,), backward)


def embedding(table, ids):
    """Row lookup: ids of any shape, output shape ids.shape + (width,)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding: id out of range for table with {table.data.shape[0]} rows"
        )
    out_data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _accumulate(table, full)

    return _make(out_data, (table,), backward)


def _check_span(h, a, b):
    n = h.data.shape[0]
    if h.data.ndim != 2:
        raise SpanError(f"pooling expects a 2-d matrix, got shape {h.data.shape}")
    if not (0 <= a <= b < n):
        raise SpanError(f"span ({a},{b}) out of range for {n} rows")


def max_pool_span(h, span):
    """Per-dimension maximum over rows span[0]..span[1] inclusive.

    Gradient routes to the first (lowest-index) argmax row per dimension.
    """
    h = _as_tensor(h)
    a, b = span
    _check_span(h, a, b)
    rows = h.data[a : b + 1]
    arg = rows.argmax(axis=0)
    out_data = rows[arg, np.arange(rows.shape[1])]

    def backward(g):
        full = np.zeros_like(h.data)
        full[a + arg, np.arange(rows.shape[1])] = g
        _accumulate(h, full)

    return _make(out_data, (h,), backward)


def mean_pool_span(h, span):
    """Arithmetic mean over rows span[0]..span[1] inclusive."""
    h = _as_tensor(h)
    a, b = span
    _check_span(h, a, b)
    k = b - a + 1
    out_data = h.data[a : b + 1].mean(axis=0)

    def backward(g):
        full = np.zeros_like(h.data)
        full[a : b + 1] = g / k
        _accumulate(h, full)

    return _make(out_data, (h,), backward)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Accepts a single logit vector with an int label, or a (K, C) matrix
    with K labels; the batched form averages over K.
    """
    logits = _as_tensor(logits)
    single = logits.data.ndim == 1
    lg = logits.data[None, :] if single else logits.data
    labels = np.asarray([labels] if single else labels, dtype=np.int64)
    k, c = lg.shape
    if labels.shape != (k,):
        raise ShapeError(f"expected {k} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    shifted = lg - lg.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    losses = logz - shifted[np.arange(k), labels]
    out_data = losses.mean()

    def backward(g):
        probs = np.exp(shifted - logz[:, None])
        probs[np.arange(k), labels] -= 1.0
        grad = g * probs / k
        _accumulate(logits, grad[0] if single else grad)

    return _make(out_data, (logits,), backward)


def mse_loss(pred, target):
    """Mean squared error; scalar inputs give (pred - target)^2."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.data.shape:
        raise ShapeError(
            f"mse_loss: prediction shape {pred.data.shape} vs target {target.shape}"
        )
    diff = pred.data - target
    n = max(diff.size, 1)
    out_data = (diff * diff).sum() / n

    def backward(g):
        _accumulate(pred, g * 2.0 * diff / n)

    return _make(out_data, (pred,), backward)


def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update on raw arrays; t is the new step count."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class Adam:
    """Adam over a dict of named parameter tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(
                    f"non-finite gradient in parameter '{name}' at step {self.t}"
                )
            p.data, self.m[name], self.v[name] = adam_step(
                p.data, p.grad, self.m[name], self.v[name], self.t,
                self.lr, self.beta1, self.beta2, self.eps,
            )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def grad_check(f, params, step=1e-3, samples_per_param=5, rng=None):
    """Worst relative error of reverse-mode vs central finite differences.

    ``f`` must be a deterministic scalar loss over ``params`` (a dict of
    Tensors). A random subset of coordinates per parameter is probed.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    loss = f()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idxs = rng.choice(n, size=min(samples_per_param, n), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            denom = max(abs(a) + abs(numeric), 1e-8)
            err = abs(a - numeric) / denom
            worst = max(worst, err)
    for p in params.values():
        p.grad = None
    return worst
