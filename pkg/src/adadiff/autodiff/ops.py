"""Differentiable primitives.

Each primitive is a forward function ``(arrays, needs, **attrs) -> (out, backward)``
registered under its op name; ``needs[i]`` says whether input ``i`` wants a
gradient so backward can skip work.  The public wrappers below are what model
code calls.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, _unbroadcast, apply, register

LN_EPS = 1e-5


def _check(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


def _broadcastable(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic ------------------------------------------------

@register("add")
def _add(xs, needs):
    a, b = xs
    _broadcastable("add", a, b)

    def bwd(g):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)
    return a + b, bwd


@register("sub")
def _sub(xs, needs):
    a, b = xs
    _broadcastable("sub", a, b)

    def bwd(g):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)
    return a - b, bwd


@register("mul")
def _mul(xs, needs):
    a, b = xs
    _broadcastable("mul", a, b)

    def bwd(g):
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)
    return a * b, bwd


@register("scale")
def _scale(xs, needs, factor: float):
    (a,) = xs
    f = a.dtype.type(factor)
    return a * f, lambda g: (g * f,)


@register("abs")
def _abs(xs, needs):
    (a,) = xs
    # subgradient sign(0) = 0 at the kink
    return np.abs(a), lambda g: (g * np.sign(a),)


# -- nonlinearities ---------------------------------------------------------

@register("tanh")
def _tanh(xs, needs):
    y = np.tanh(xs[0])
    return y, lambda g: (g * (1 - y * y),)


def _sigmoid_np(x):
    return 0.5 * (np.tanh(0.5 * x) + 1)


@register("sigmoid")
def _sigmoid(xs, needs):
    y = _sigmoid_np(xs[0])
    return y, lambda g: (g * y * (1 - y),)


@register("relu")
def _relu(xs, needs):
    (a,) = xs
    pos = a > 0
    return a * pos, lambda g: (g * pos,)


@register("gated_tanh_sigmoid")
def _gated(xs, needs, axis: int = 1):
    (a,) = xs
    n = a.shape[axis]
    _check(n % 2 == 0, "gated_tanh_sigmoid", a.shape)
    filt, gate = np.split(a, 2, axis=axis)
    tf = np.tanh(filt)
    sg = _sigmoid_np(gate)

    def bwd(g):
        d_filt = g * sg * (1 - tf * tf)
        d_gate = g * tf * sg * (1 - sg)
        return (np.concatenate([d_filt, d_gate], axis=axis),)
    return tf * sg, bwd


@register("softmax")
def _softmax(xs, needs, axis: int = -1):
    (a,) = xs
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return y, bwd


# -- linear maps --------------------------------------------------------------

@register("matmul")
def _matmul(xs, needs):
    a, b = xs
    _check(a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2], "matmul", a.shape, b.shape)
    try:
        out = np.matmul(a, b)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape}, {b.shape}") from None

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape) if needs[0] else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape) if needs[1] else None
        return ga, gb
    return out, bwd


@register("affine")
def _affine(xs, needs):
    """y = x @ w + b over the last axis of x; w is (in, out)."""
    x, w, b = xs
    _check(w.ndim == 2 and x.shape[-1] == w.shape[0] and b.shape == (w.shape[1],),
           "affine", x.shape, w.shape, b.shape)
    out = x @ w + b

    def bwd(g):
        gx = g @ w.T if needs[0] else None
        gw = x.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1]) if needs[1] else None
        gb = g.reshape(-1, w.shape[1]).sum(axis=0) if needs[2] else None
        return gx, gw, gb
    return out, bwd


@register("conv1d")
def _conv1d(xs, needs, dilation: int = 1):
    """Non-causal dilated 1-D convolution, (B, Cin, L) -> (B, Cout, L).

    Weights are (Cout, Cin, k) with odd k; zero padding of d*(k-1)/2 on both
    sides keeps the length unchanged.
    """
    x, w, b = xs
    _check(x.ndim == 3 and w.ndim == 3 and x.shape[1] == w.shape[1] and b.shape == (w.shape[0],),
           "conv1d", x.shape, w.shape, b.shape)
    k = w.shape[2]
    _check(k % 2 == 1, "conv1d (kernel must be odd)", w.shape)
    B, cin, L = x.shape
    cout = w.shape[0]
    if k == 1:
        w2 = w[:, :, 0]
        out = np.matmul(w2, x) + b[:, None]

        def bwd1(g):
            gx = np.matmul(w2.T, g) if needs[0] else None
            gw = np.tensordot(g, x, axes=([0, 2], [0, 2]))[:, :, None] if needs[1] else None
            gb = g.sum(axis=(0, 2)) if needs[2] else None
            return gx, gw, gb
        return out, bwd1

    pad = dilation * (k - 1) // 2
    xp = np.zeros((B, cin, L + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + L] = x
    cols = np.stack([xp[:, :, j * dilation:j * dilation + L] for j in range(k)], axis=1)
    cols = cols.reshape(B, k * cin, L)
    w2 = w.transpose(0, 2, 1).reshape(cout, k * cin)
    out = np.matmul(w2, cols) + b[:, None]

    def bwd(g):
        gx = gw = gb = None
        if needs[0]:
            gcols = np.matmul(w2.T, g).reshape(B, k, cin, L)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j * dilation:j * dilation + L] += gcols[:, j]
            gx = gxp[:, :, pad:pad + L]
        if needs[1]:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(cout, k, cin).transpose(0, 2, 1)
        if needs[2]:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb
    return out, bwd


# -- normalisation -------------------------------------------------------------

@register("layer_norm")
def _layer_norm(xs, needs, axis: int = -1, eps: float = LN_EPS):
    """(x - mean) / sqrt(var + eps) along ``axis``, population variance, no affine."""
    (x,) = xs
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    y = xc * inv

    def bwd(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gy),)
    return y, bwd


# -- shape plumbing ------------------------------------------------------------

@register("concat")
def _concat(xs, needs, axis: int = 0):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeError(f"concat along axis {axis}: shapes {[a.shape for a in xs]}") from None
    bounds = np.cumsum([a.shape[axis] for a in xs])[:-1]

    def bwd(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if nd else None for p, nd in zip(parts, needs))
    return out, bwd


@register("transpose")
def _transpose(xs, needs, axes: tuple[int, ...]):
    (a,) = xs
    inv = np.argsort(axes)
    return a.transpose(axes), lambda g: (g.transpose(inv),)


@register("reshape")
def _reshape(xs, needs, shape: tuple[int, ...]):
    (a,) = xs
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


@register("embedding_lookup")
def _embedding(xs, needs, ids: np.ndarray):
    (table,) = xs
    _check(table.ndim == 2, "embedding_lookup", table.shape)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table {table.shape}")

    def bwd(g):
        gt = np.zeros_like(table)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)
    return table[ids], bwd


# -- reductions and losses -----------------------------------------------------

@register("sum")
def _sum(xs, needs, axis=None, keepdims: bool = False):
    (a,) = xs
    out = np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return out, bwd


@register("mean")
def _mean(xs, needs, axis=None, keepdims: bool = False):
    (a,) = xs
    out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
    count = a.size // max(out.size, 1)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / a.dtype.type(count), a.shape).copy(),)
    return out, bwd


@register("mse")
def _mse(xs, needs):
    p, t = xs
    _check(p.shape == t.shape, "mse", p.shape, t.shape)
    d = p - t
    n = p.dtype.type(d.size)
    out = np.asarray((d * d).sum() / n)

    def bwd(g):
        gd = (2 * g / n) * d
        return (gd if needs[0] else None, -gd if needs[1] else None)
    return out, bwd


@register("weighted_mse")
def _weighted_mse(xs, needs, denom: float | None = None):
    """sum(w * (p - t)^2) / denom; denom defaults to the element count."""
    p, t, w = xs
    _check(p.shape == t.shape, "weighted_mse", p.shape, t.shape)
    _broadcastable("weighted_mse", p, w)
    d = p - t
    n = p.dtype.type(d.size if denom is None else denom)
    wd = w * d
    out = np.asarray((wd * d).sum() / n)

    def bwd(g):
        gd = (2 * g / n) * wd
        gw = _unbroadcast(g / n * d * d, w.shape) if needs[2] else None
        return (gd if needs[0] else None, -gd if needs[1] else None, gw)
    return out, bwd


# -- public wrappers -----------------------------------------------------------

def add(a, b) -> Tensor:
    return apply("add", (a, b))


def sub(a, b) -> Tensor:
    return apply("sub", (a, b))


def mul(a, b) -> Tensor:
    return apply("mul", (a, b))


def scale(a, factor: float) -> Tensor:
    return apply("scale", (a,), factor=float(factor))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return apply("abs", (a,))


def tanh(a) -> Tensor:
    return apply("tanh", (a,))


def sigmoid(a) -> Tensor:
    return apply("sigmoid", (a,))


def relu(a) -> Tensor:
    return apply("relu", (a,))


def gated_tanh_sigmoid(a, axis: int = 1) -> Tensor:
    """tanh(first half) * sigmoid(second half), split along ``axis``."""
    return apply("gated_tanh_sigmoid", (a,), axis=axis)


def softmax(a, axis: int = -1) -> Tensor:
    return apply("softmax", (a,), axis=axis)


def matmul(a, b) -> Tensor:
    return apply("matmul", (a, b))


def affine(x, w, b) -> Tensor:
    return apply("affine", (x, w, b))


def conv1d(x, w, b, dilation: int = 1) -> Tensor:
    return apply("conv1d", (x, w, b), dilation=int(dilation))


def layer_norm(x, gamma=None, beta=None, axis: int = -1, eps: float = LN_EPS) -> Tensor:
    """Normalise along ``axis`` then apply the optional elementwise affine."""
    y = apply("layer_norm", (x,), axis=axis, eps=eps)
    if gamma is not None:
        y = mul(y, gamma)
    if beta is not None:
        y = add(y, beta)
    return y


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return apply("concat", tuple(tensors), axis=axis)


def transpose(a, axes: Sequence[int]) -> Tensor:
    return apply("transpose", (a,), axes=tuple(axes))


def reshape(a, shape: Sequence[int]) -> Tensor:
    return apply("reshape", (a,), shape=tuple(shape))


def embedding_lookup(table, ids) -> Tensor:
    return apply("embedding_lookup", (table,), ids=np.asarray(ids, dtype=np.int64))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return apply("sum", (a,), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return apply("mean", (a,), axis=axis, keepdims=keepdims)


def mse(pred, target) -> Tensor:
    return apply("mse", (pred, target))


def weighted_mse(pred, target, weights, denom: float | None = None) -> Tensor:
    return apply("weighted_mse", (pred, target, weights), denom=denom)
