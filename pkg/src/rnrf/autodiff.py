"""Minimal reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional graph node recorded while the
forward computation runs (define-by-run). ``backward`` walks the tape in
reverse topological order and accumulates gradients into every reachable
leaf that has ``requires_grad`` set. The op set is intentionally small:
affine maps, the usual nonlinearities, sin/cos/exp, elementwise arithmetic,
reductions, an exclusive cumulative sum (for transmittance), concatenation,
row gather, and a fused sinusoidal feature op used by the field encoders.

Reductions accumulate in float64 regardless of storage dtype; everything
else preserves the input dtype, so the same graph code runs in float32 for
training and float64 for finite-difference verification.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "no_grad",
    "backward",
    "add", "sub", "mul", "div", "neg", "square",
    "matmul", "affine", "affine_multi", "affine_relu", "affine_multi_relu",
    "relu", "sigmoid", "softplus", "exp", "sin", "cos",
    "sum_", "mean", "cumsum_exclusive",
    "concat", "gather_rows", "reshape",
    "fourier_features",
]


class GraphError(RuntimeError):
    """Backward was asked to run on a detached or non-scalar target."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording inside its scope."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class _Node:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """An ndarray with an optional grad buffer and tape node."""

    __slots__ = ("data", "grad", "node", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.node = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are promoted to constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _needs_tape(*tensors):
    if not _grad_enabled:
        return False
    return any(t.requires_grad or t.node is not None for t in tensors)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p.node is not None for p in parents):
        out.node = _Node(tuple(parents), backward_fn)
        out.requires_grad = True
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True) if g.dtype != t.data.dtype else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to the given (broadcast-source) shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf.

    ``loss`` must be a scalar tensor attached to a graph. Gradients sum
    across repeated calls; callers zero them between optimization steps.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward target must be a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward target must be scalar, got shape {loss.data.shape}")
    if loss.node is None:
        raise GraphError("backward through a detached graph: target records no operations")

    # reverse topological order via iterative DFS
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            if p.node is not None and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None:
                continue
            if p.node is None:
                if p.requires_grad:
                    _accumulate(p, pg)
            else:
                key = id(p)
                if key in grads:
                    grads[key] += pg
                else:
                    grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bwd)


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a):
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (g * (2.0 * a.data),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), bwd)


def affine(x, w, b):
    """x @ w + b for a 2-D batch x."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    out = x.data @ w.data
    out += b.data

    def bwd(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0).astype(b.dtype)

    return _make(out, (x, w, b), bwd)


def affine_relu(x, w, b):
    """relu(x @ w + b), fused to avoid intermediate copies on the hot path."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    out = x.data @ w.data
    out += b.data
    np.maximum(out, 0, out=out)

    def bwd(g):
        gm = g * (out > 0)
        return gm @ w.data.T, x.data.T @ gm, gm.sum(axis=0).astype(b.dtype)

    return _make(out, (x, w, b), bwd)


def affine_multi_relu(xs, ws, b):
    """relu(affine_multi(...)), fused like affine_relu."""
    xs = [_as_tensor(x) for x in xs]
    ws = [_as_tensor(w) for w in ws]
    b = _as_tensor(b)
    out = xs[0].data @ ws[0].data
    for x, w in zip(xs[1:], ws[1:]):
        out += x.data @ w.data
    out += b.data
    np.maximum(out, 0, out=out)

    def bwd(g):
        gm = g * (out > 0)
        grads = []
        for x, w in zip(xs, ws):
            if x.requires_grad or x.node is not None:
                grads.append(_unbroadcast(gm @ w.data.T, x.shape))
            else:
                grads.append(None)
        for x, w in zip(xs, ws):
            if w.requires_grad or w.node is not None:
                xv = x.data
                if xv.shape[0] == 1 and gm.shape[0] > 1:
                    grads.append(xv.T @ gm.sum(axis=0, keepdims=True))
                else:
                    grads.append(xv.T @ gm)
            else:
                grads.append(None)
        grads.append(gm.sum(axis=0).astype(b.dtype))
        return tuple(grads)

    return _make(out, tuple(xs) + tuple(ws) + (b,), bwd)


def affine_multi(xs, ws, b):
    """sum_i xs[i] @ ws[i] + b without materializing the concatenated input.

    Equivalent to affine(concat(xs, axis=1), vstack(ws), b); used on the hot
    path where the input segments come from different sources.
    """
    xs = [_as_tensor(x) for x in xs]
    ws = [_as_tensor(w) for w in ws]
    if len(xs) != len(ws):
        raise ValueError("affine_multi needs one weight block per input segment")
    b = _as_tensor(b)
    out = xs[0].data @ ws[0].data
    for x, w in zip(xs[1:], ws[1:]):
        out += x.data @ w.data
    out += b.data

    def bwd(g):
        grads = []
        for x, w in zip(xs, ws):
            if x.requires_grad or x.node is not None:
                grads.append(_unbroadcast(g @ w.data.T, x.shape))
            else:
                grads.append(None)
        for x, w in zip(xs, ws):
            if w.requires_grad or w.node is not None:
                xv = x.data
                if xv.shape[0] == 1 and g.shape[0] > 1:
                    # x was broadcast across the batch
                    grads.append(xv.T @ g.sum(axis=0, keepdims=True))
                else:
                    grads.append(xv.T @ g)
            else:
                grads.append(None)
        grads.append(g.sum(axis=0).astype(b.dtype))
        return tuple(grads)

    return _make(out, tuple(xs) + tuple(ws) + (b,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and transcendentals


def relu(a):
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a):
    a = _as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    a = _as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)

    def bwd(g):
        return (g * _stable_sigmoid(x),)

    return _make(out, (a,), bwd)


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def sin(a):
    a = _as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = _as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (g * -np.sin(a.data),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, np.asarray(1.0 / n, dtype=a.dtype))


def cumsum_exclusive(a, axis=-1):
    """y[..., i] = sum_{j < i} x[..., j]; the first entry along axis is 0."""
    a = _as_tensor(a)
    x = a.data
    cs = np.cumsum(x, axis=axis, dtype=np.float64)
    out = np.zeros_like(x)
    sl_out = [slice(None)] * x.ndim
    sl_in = [slice(None)] * x.ndim
    sl_out[axis] = slice(1, None)
    sl_in[axis] = slice(None, -1)
    out[tuple(sl_out)] = cs[tuple(sl_in)].astype(x.dtype)

    def bwd(g):
        # d/dx_j = sum over i > j of g_i: an exclusive cumsum from the far end
        rev = np.flip(g, axis=axis)
        cs = np.cumsum(rev, axis=axis, dtype=np.float64)
        ex = np.zeros(g.shape, dtype=np.float64)
        ex[tuple(sl_out)] = cs[tuple(sl_in)]
        return (np.flip(ex, axis=axis).astype(g.dtype),)

    return _make(out, (a,), bwd)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        grads = []
        sl = [slice(None)] * g.ndim
        for i, t in enumerate(tensors):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(out, tuple(tensors), bwd)


def gather_rows(table, idx):
    """table[idx] for a 2-D table; backward scatter-adds into the table."""
    table = _as_tensor(table)
    idx = np.asarray(idx)
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out, (table,), bwd)


def reshape(a, shape):
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# fused sinusoidal features


def fourier_features(x, num_bands, band_weights=None):
    """[x, w0*sin(2^0 x), w0*cos(2^0 x), ..., w_{m-1}*sin/cos(2^{m-1} x)].

    x is (N, k); output is (N, k + 2*k*num_bands). band_weights, when given,
    scales each band (coarse-to-fine window); the identity part is never
    scaled. Differentiable in x; band weights are data.
    """
    x = _as_tensor(x)
    from . import _kernels

    w = _band_weights_array(num_bands, band_weights, x.dtype)
    out = _kernels.fourier_forward(x.data, num_bands, w)
    k = x.data.shape[1]

    def bwd(g):
        return (_kernels.fourier_backward(g, k, num_bands, out),)

    return _make(out, (x,), bwd)


def _band_weights_array(num_bands, band_weights, dtype):
    if band_weights is None:
        return np.ones(num_bands, dtype=np.float64)
    w = np.asarray(band_weights, dtype=np.float64)
    if w.shape != (num_bands,):
        raise ValueError(f"band_weights must have shape ({num_bands},)")
    return w
