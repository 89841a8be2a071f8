"""Differentiable primitives.

Each primitive computes its forward value with numpy and attaches a closure
mapping the output gradient to one gradient per input (``None`` for inputs
that do not need one).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..exceptions import DimensionError, ParameterError
from .tensor import Tensor, as_tensor


def _make(data, parents, backward_fn, name=None) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, name=name)
    return Tensor(data, requires_grad=True, name=name, parents=parents, backward_fn=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(a.data * c, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make(out, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bw)


def power(a, exponent: float) -> Tensor:
    """``a ** exponent`` for a fixed real exponent.

    The derivative is taken as 0 where the base is 0 and the exponent is
    below 1, and identically 0 for exponent 0.
    """
    a = as_tensor(a)
    p = float(exponent)
    out = np.power(a.data, p) if p != 0.0 else np.ones_like(a.data)

    def bw(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        if p == 1.0:
            return (g,)
        base = a.data
        if p < 1.0:
            safe = np.where(base != 0.0, base, 1.0)
            d = np.where(base != 0.0, p * np.power(safe, p - 1.0), 0.0)
        else:
            d = p * np.power(base, p - 1.0)
        return (g * d,)

    return _make(out, (a,), bw)


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), bw)


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= lo

    def bw(g):
        return (g * keep,)

    return _make(np.where(keep, a.data, lo), (a,), bw)


def stop_gradient(a) -> Tensor:
    """Same values, no path back to whatever produced ``a``."""
    return Tensor(as_tensor(a).data)


# ----------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim) -> Optional[tuple]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bw)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    """Join along ``axis`` (the channel axis by default)."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: no tensors given")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {ax}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax))
            for i in range(len(ts))
        )

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def take(a, indices, axis: int = 0) -> Tensor:
    """Select whole slices along ``axis`` (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0) if idx.ndim else g)
        return (full,)

    return _make(np.take(a.data, idx, axis=ax), (a,), bw)


def gather(a, index, axis: int = -1) -> Tensor:
    """Pick one entry per slice along ``axis``: ``out[..., 0, ...] = a[..., index, ...]``.

    ``index`` has ``a``'s shape with ``axis`` of size 1 (or that axis
    dropped). Equivalent to a dot product with a one-hot mask.
    """
    a = as_tensor(a)
    ax = axis % a.ndim
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim == a.ndim - 1:
        idx = np.expand_dims(idx, ax)
    expected = a.shape[:ax] + (1,) + a.shape[ax + 1:]
    if idx.shape != expected:
        raise DimensionError(f"gather: index shape {idx.shape} does not match {expected} for input {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[ax]):
        raise DimensionError(f"gather: index out of range for axis of size {a.shape[ax]}")
    out = np.take_along_axis(a.data, idx, axis=ax)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=ax)
        return (full,)

    return _make(out, (a,), bw)


# ----------------------------------------------------------------------------
# linear maps


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def dense(x, W, b) -> Tensor:
    """``x @ W + b`` for ``x`` of shape [N, I], ``W`` [I, O], ``b`` [O]."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"dense: input {x.shape}, weight {W.shape} and bias {b.shape} do not conform")

    def bw(g):
        gx = g @ W.data.T if x.requires_grad else None
        gW = x.data.T @ g if W.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return _make(x.data @ W.data + b.data, (x, W, b), bw)


def im2col_3x3(x) -> Tensor:
    """Zero-padded 3x3 neighbourhoods: [N, C, H, W] -> [N*H*W, C*9].

    Column order is (c, i, j) so a kernel [F, C, 3, 3] reshaped to
    [F, C*9] lines up with it.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"im2col_3x3: expected [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * 9)

    def bw(g):
        g6 = g.reshape(n, h, w, c, 3, 3)
        gpad = np.zeros((n, c, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                gpad[:, :, i:i + h, j:j + w] += g6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return (gpad[:, :, 1:-1, 1:-1],)

    return _make(cols, (x,), bw)


def conv_from_cols(cols, K, b, n: int, h: int, w: int) -> Tensor:
    """Apply a 3x3 kernel [F, C, 3, 3] to precomputed ``im2col_3x3`` columns."""
    cols, K, b = as_tensor(cols), as_tensor(K), as_tensor(b)
    if K.ndim != 4 or K.shape[2:] != (3, 3) or cols.shape[1] != K.shape[1] * 9:
        raise DimensionError(f"conv2d_3x3: kernel {K.shape} does not match input columns {cols.shape}")
    f = K.shape[0]
    Wmat = transpose(reshape(K, (f, -1)), (1, 0))
    out = dense(cols, Wmat, b)
    return transpose(reshape(out, (n, h, w, f)), (0, 3, 1, 2))


def conv2d_3x3(x, K, b) -> Tensor:
    """Stride-1 cross-correlation with zero padding 1: [N,C,H,W] -> [N,F,H,W]."""
    x, K, b = as_tensor(x), as_tensor(K), as_tensor(b)
    if x.ndim != 4 or K.ndim != 4 or K.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d_3x3: input {x.shape} and kernel {K.shape} must be [N,C,H,W] and [F,C,3,3]")
    if x.shape[1] != K.shape[1]:
        raise DimensionError(f"conv2d_3x3: input channels {x.shape} do not match kernel {K.shape}")
    if b.shape != (K.shape[0],):
        raise DimensionError(f"conv2d_3x3: bias {b.shape} does not match kernel {K.shape}")
    n, _, h, w = x.shape
    return conv_from_cols(im2col_3x3(x), K, b, n, h, w)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _make(out, (x,), bw)


def avgpool2x(x) -> Tensor:
    """2x2 mean pooling of the last two axes (both must be even)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2x: spatial size {(h, w)} must be even")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

    def bw(g):
        g = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
        return (g * 0.25,)

    return _make(out, (x,), bw)


# ----------------------------------------------------------------------------
# softmax


def softmax_temp(v, tau: float = 1.0, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Tempered softmax ``exp(v/tau - max) / sum``.

    ``mask`` (boolean, broadcastable to ``v``) marks the entries that take
    part; excluded entries come out exactly 0 and receive no gradient.
    """
    if not tau > 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    v = as_tensor(v)
    z = v.data / tau
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner) / tau,)

    return _make(out, (v,), bw)
