"""Differentiable tensor operations.

Every function takes `Tensor`s (array-likes are wrapped), computes its
result with numpy and records an adjoint on the active tape. Results keep
the dtype of the first tensor operand.

Convolutions and pooling work on single images laid out (C, H, W); the
encoder works on (T, d) rows, with per-head weights broadcast over a
leading head axis.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from relation_engine.errors import ShapeError
from relation_engine.tensor import Tensor, record_op

LAYER_NORM_EPS = 1e-5
BCE_CLAMP = 1e-7
MIN_MAX_EPS = 1e-8

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(arr, like: Tensor) -> Tensor:
    return Tensor(np.asarray(arr, dtype=like.dtype), dtype=like.dtype)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes that broadcasting added or stretched."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


def _broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, axis=-1, detail="not broadcastable") from None


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ----------------------------------------------------------------------
# Elementwise algebra
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)
    out = _result(a.data + b.data, a)
    return record_op("add", (a, b), out,
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a, b)
    out = _result(a.data - b.data, a)
    return record_op("sub", (a, b), out,
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Hadamard (elementwise) product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("hadamard", a, b)
    out = _result(a.data * b.data, a)
    return record_op("hadamard", (a, b), out,
                     lambda g: (unbroadcast(g * b.data, a.shape),
                                unbroadcast(g * a.data, b.shape)))


hadamard = mul


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record_op("neg", (a,), _result(-a.data, a), lambda g: (-g,))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return record_op("scale", (a,), _result(a.data * factor, a), lambda g: (g * factor,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics (1-D operands, batch broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", a.shape, b.shape, axis=None, detail="scalar operand")
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner_b:
        raise ShapeError("matmul", a.shape, b.shape, axis=-1)

    A = a.data if a.ndim > 1 else a.data[None, :]
    B = b.data if b.ndim > 1 else b.data[:, None]
    try:
        y = A @ B
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, axis=0, detail="batch dims") from None
    if a.ndim == 1:
        y = y[..., 0, :]
    if b.ndim == 1:
        y = y[..., 0]

    def adjoint(g):
        G = g
        if b.ndim == 1:
            G = G[..., None]
        if a.ndim == 1:
            G = np.expand_dims(G, -2)
        gA = G @ np.swapaxes(B, -1, -2)
        gB = np.swapaxes(A, -1, -2) @ G
        return (unbroadcast(gA, A.shape).reshape(a.shape),
                unbroadcast(gB, B.shape).reshape(b.shape))

    return record_op("matmul", (a, b), _result(y, a), adjoint)


# ----------------------------------------------------------------------
# Structural ops
# ----------------------------------------------------------------------

def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", None, None, axis=axis, detail="no operands")
    first = tensors[0]
    ax = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            t.shape[i] != first.shape[i] for i in range(first.ndim) if i != ax
        ):
            raise ShapeError("concat", first.shape, t.shape, axis=axis)
    sizes = [t.shape[ax] for t in tensors]
    out = _result(np.concatenate([t.data for t in tensors], axis=ax), first)
    cuts = np.cumsum(sizes)[:-1]
    return record_op("concat", tensors, out, lambda g: np.split(g, cuts, axis=ax))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack", None, None, axis=axis, detail="no operands")
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError("stack", tensors[0].shape, t.shape, axis=axis)
    out = _result(np.stack([t.data for t in tensors], axis=axis), tensors[0])
    ax = axis % out.ndim
    n = len(tensors)
    return record_op("stack", tensors, out,
                     lambda g: [np.take(g, i, axis=ax) for i in range(n)])


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape), axis=None) from None
    return record_op("reshape", (a,), _result(y, a), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record_op("transpose", (a,), _result(a.data.transpose(axes), a),
                     lambda g: (g.transpose(inverse),))


def getitem(a, index) -> Tensor:
    """Indexing and gathering; repeated indices accumulate in the adjoint."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays or ints, not tensors")

    def adjoint(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return record_op("getitem", (a,), _result(a.data[index], a), adjoint)


def embedding(table, ids) -> Tensor:
    """Gather rows of `table` (V, d) for integer `ids`."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape, axis=0,
                         detail=f"id out of range [0, {table.shape[0]})")
    return getitem(table, ids)


# ----------------------------------------------------------------------
# Reductions
# ----------------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def adjoint(g):
        if not keepdims and a.ndim:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op("sum", (a,), _result(a.data.sum(axis=axes, keepdims=keepdims), a),
                     adjoint)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean", a.shape, None, axis=axis, detail="empty reduction")

    def adjoint(g):
        if not keepdims and a.ndim:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return record_op("mean", (a,), _result(a.data.mean(axis=axes, keepdims=keepdims), a),
                     adjoint)


def mean_pool(x) -> Tensor:
    """Spatial mean of a (C, H, W) map -> (C,)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError("mean_pool", x.shape, None, axis=(1, 2), detail="expected (C, H, W)")
    return mean(x, axis=(1, 2))


def algebra(a, b=None, kind: str = "add", axis: int = 0) -> Tensor:
    """Dispatch one of the basic algebra kinds by name."""
    if kind == "matmul":
        return matmul(a, b)
    if kind == "add":
        return add(a, b)
    if kind == "hadamard":
        return mul(a, b)
    if kind == "concat":
        return concat([a, b], axis=axis)
    if kind == "mean_pool":
        return mean_pool(a)
    raise ValueError(f"Unknown algebra kind: {kind}")


# ----------------------------------------------------------------------
# Activations and normalization
# ----------------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record_op("relu", (x,), _result(np.where(mask, x.data, 0), x),
                     lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return record_op("gelu", (x,), _result(x.data * cdf, x),
                     lambda g: (g * (cdf + x.data * pdf),))


def activation(x, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"Unknown activation: {kind}")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax", x.shape, None, axis=axis, detail="empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return record_op("softmax", (x,), _result(y, x),
                     lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last dimension, then apply the affine pair."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1] if x.ndim else 0
    if n < 2:
        raise ShapeError("layer_norm", x.shape, gamma.shape, axis=-1,
                         detail="last dimension must be >= 2")
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, axis=-1)

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = xhat * gamma.data + beta.data

    def adjoint(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        dgamma = (flat_g * xhat.reshape(-1, n)).sum(axis=0)
        dbeta = flat_g.sum(axis=0)
        return dx, dgamma, dbeta

    return record_op("layer_norm", (x, gamma, beta), _result(y, x), adjoint)


def min_max_norm(x, eps: float = MIN_MAX_EPS) -> Tensor:
    """Rescale all entries to [0, 1]; a (near-)constant input maps to zeros."""
    x = as_tensor(x)
    flat = x.data.reshape(-1)
    lo_i, hi_i = int(np.argmin(flat)), int(np.argmax(flat))
    lo, hi = flat[lo_i], flat[hi_i]
    r = hi - lo
    if r <= eps:
        return record_op("min_max_norm", (x,), _result(np.zeros_like(x.data), x),
                         lambda g: (np.zeros_like(g),))
    y = (x.data - lo) / r

    def adjoint(g):
        gf = g.reshape(-1)
        s1 = gf.sum()
        s2 = (gf * y.reshape(-1)).sum() / r
        grad = gf / r
        grad[hi_i] -= s2
        grad[lo_i] += -s1 / r + s2
        return (grad.reshape(x.shape),)

    return record_op("min_max_norm", (x,), _result(y, x), adjoint)


# ----------------------------------------------------------------------
# Convolution, pooling, sampling
# ----------------------------------------------------------------------

def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 convolution of a (C_in, H, W) map with (C_out, C_in, k, k) kernels.

    k=1 is a per-position linear map over channels; k=3 pads by one so the
    spatial size is preserved.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError("conv2d", x.shape, weight.shape, axis=None,
                         detail="expected (C_in, H, W) and (C_out, C_in, k, k)")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError("conv2d", x.shape, weight.shape, axis=(2, 3),
                         detail="kernels must be 1x1 or 3x3")
    if x.shape[0] != c_in:
        raise ShapeError("conv2d", x.shape, weight.shape, axis=0, detail="channel mismatch")
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError("conv2d", weight.shape, bias.shape, axis=0)
        inputs.append(bias)

    _, h, w = x.shape
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))  # (C_in, H, W, k, k)
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(h * w, c_in * k * k)
    wmat = weight.data.reshape(c_out, -1)
    y = (cols @ wmat.T).T.reshape(c_out, h, w)
    if bias is not None:
        y = y + bias.data[:, None, None]

    def adjoint(g):
        gm = g.reshape(c_out, h * w)
        dw = (gm @ cols).reshape(weight.shape)
        dcols = (gm.T @ wmat).reshape(h, w, c_in, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w] += dcols[:, :, :, i, j].transpose(2, 0, 1)
        dx = dxp[:, pad:pad + h, pad:pad + w] if pad else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(gm.sum(axis=1))
        return grads

    return record_op(f"conv2d_{k}x{k}", inputs, _result(y, x), adjoint)


def avg_pool2(x) -> Tensor:
    """2x2 average pooling with stride 2; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError("avg_pool2", x.shape, None, axis=(1, 2), detail="map too small")
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    cropped = x.data[:, :h2 * 2, :w2 * 2]
    y = cropped.reshape(c, h2, 2, w2, 2).mean(axis=(2, 4))

    def adjoint(g):
        grad = np.zeros_like(x.data)
        grad[:, :h2 * 2, :w2 * 2] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
        return (grad,)

    return record_op("avg_pool2", (x,), _result(y, x), adjoint)


def bilinear_sample(x, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Sample a (C, H, W) map on the grid ys x xs (fractional map coordinates).

    Coordinates are clamped to the map; a sample exactly on a grid point
    returns that grid value. Output shape is (C, len(ys), len(xs)).
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError("bilinear_sample", x.shape, None, axis=None, detail="expected (C, H, W)")
    _, h, w = x.shape
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]

    corners = (
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x1, (1 - wy) * wx),
        (y1, x0, wy * (1 - wx)),
        (y1, x1, wy * wx),
    )
    out = np.zeros((x.shape[0], len(ys), len(xs)), dtype=x.dtype)
    for yi, xi, wt in corners:
        out += x.data[:, yi[:, None], xi[None, :]] * wt.astype(x.dtype)

    def adjoint(g):
        grad = np.zeros((h, w, x.shape[0]), dtype=x.dtype)
        gt = g.transpose(1, 2, 0)
        for yi, xi, wt in corners:
            rows = np.broadcast_to(yi[:, None], wt.shape)
            cols = np.broadcast_to(xi[None, :], wt.shape)
            np.add.at(grad, (rows, cols), (gt * wt[..., None]).astype(x.dtype))
        return (grad.transpose(2, 0, 1),)

    return record_op("bilinear_sample", (x,), _result(out, x), adjoint)


# ----------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------

def cross_entropy(logits, target) -> Tensor:
    """Mean softmax cross-entropy of raw logits (C,) or (B, C) against class indices."""
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.ndim != 2:
        raise ShapeError("cross_entropy", logits.shape, None, axis=-1,
                         detail="expected (C,) or (B, C) logits")
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    batch, classes = z.shape
    if targets.shape != (batch,):
        raise ShapeError("cross_entropy", logits.shape, targets.shape, axis=0)
    bad = (targets < 0) | (targets >= classes)
    if bad.any():
        raise ValueError(
            f"cross_entropy: class index {int(targets[bad][0])} out of range [0, {classes})"
        )

    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    total = e.sum(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(total[:, 0])
    rows = np.arange(batch)
    loss = (lse - z[rows, targets]).mean()
    probs = e / total

    def adjoint(g):
        grad = probs.copy()
        grad[rows, targets] -= 1.0
        grad = grad * (g / batch)
        return (grad[0] if single else grad,)

    return record_op("cross_entropy", (logits,), _result(loss, logits), adjoint)


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape, axis=None)
    diff = pred.data - target.data
    n = diff.size
    return record_op("mse", (pred, target), _result((diff * diff).mean(), pred),
                     lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))


def bce(pred, target) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [1e-7, 1 - 1e-7]."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("bce", pred.shape, target.shape, axis=None)
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = target.data
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean()
    inside = (pred.data >= BCE_CLAMP) & (pred.data <= 1.0 - BCE_CLAMP)

    def adjoint(g):
        dp = (-(t / p) + (1.0 - t) / (1.0 - p)) / n * g * inside
        dt = (np.log(1.0 - p) - np.log(p)) / n * g
        return dp, dt

    return record_op("bce", (pred, target), _result(loss, pred), adjoint)


def loss(pred, target, kind: str) -> Tensor:
    if kind == "cross_entropy":
        return cross_entropy(pred, target)
    if kind == "mse":
        return mse(pred, target)
    if kind == "bce":
        return bce(pred, target)
    raise ValueError(f"Unknown loss kind: {kind}")
