"""Differentiable primitives.

Every function here takes :class:`~dbnseg.tensor.Tensor` operands, computes
its result with numpy in the operands' dtype, and registers a
vector-Jacobian product on the active tape. Results are deterministic: no
threading, fixed reduction order.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_output


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_rank(x: Tensor, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{what} expects a rank-{rank} tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_output(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_output(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_output(out, (a, b), vjp)


def scalar_affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` with Python-float constants."""
    x = as_tensor(x)
    s = x.data.dtype.type(scale)
    out = x.data * s + x.data.dtype.type(shift)

    def vjp(g):
        return (g * s,)

    return make_output(out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0
    out = np.where(keep, x.data, x.data.dtype.type(0))

    def vjp(g):
        return (np.where(keep, g, g.dtype.type(0)),)

    return make_output(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    one = d.dtype.type(1)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, one / (one + e), e / (one + e))

    def vjp(g):
        return (g * out * (one - out),)

    return make_output(out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    out = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return make_output(out, (x,), vjp)


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``x * scale[c] + shift[c]`` on an ``[N, C, ...]`` tensor."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"channel_affine: expected scale/shift of shape ({c},), got {scale.shape}, {shift.shape}")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    s, b = scale.data.reshape(bshape), shift.data.reshape(bshape)
    out = x.data * s + b
    axes = (0,) + tuple(range(2, x.ndim))

    def vjp(g):
        return g * s, (g * x.data).sum(axis=axes), g.sum(axis=axes)

    return make_output(out, (x, scale, shift), vjp)


# --------------------------------------------------------------------------
# shape manipulation

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from e

    def vjp(g):
        return (g.reshape(x.shape),)

    return make_output(out, (x,), vjp)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return make_output(out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return make_output(out, tensors, vjp)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[B, M, K] @ [B, K, N]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        return np.matmul(g, b.data.transpose(0, 2, 1)), np.matmul(a.data.transpose(0, 2, 1), g)

    return make_output(out, (a, b), vjp)


# --------------------------------------------------------------------------
# spatial

def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, ``[N,Cin,H,W] -> [N,Cout,H',W']``.

    ``H' = (H + 2*padding - kh) // stride + 1`` and likewise for ``W'``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_rank(x, 4, "conv2d input")
    _check_rank(kernel, 4, "conv2d kernel")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin} (kernel shape {kernel.shape})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == 1 and kw == 1:
        cols = xd[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(n * ho * wo, cin)
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    w2 = kernel.data.reshape(cout, -1)
    out2 = cols @ w2.T
    if bias is not None:
        out2 += bias.data
    out = np.ascontiguousarray(out2.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (g2.T @ cols).reshape(kernel.shape)
        gcols = (g2 @ w2).reshape(n, ho, wo, cin, kh, kw)
        gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        gb = g2.sum(axis=0) if bias is not None else None
        return np.ascontiguousarray(gx), gk, gb

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_output(out, inputs, vjp)


def _resize_plan(size_in: int, size_out: int, dtype):
    # align_corners=False: src = (dst + 0.5) * in/out - 0.5, clamped below at 0
    scale = size_in / size_out
    src = (np.arange(size_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), size_in - 1)
    i1 = np.minimum(i0 + 1, size_in - 1)
    lam = (src - i0).astype(dtype)
    mat = np.zeros((size_out, size_in), dtype=dtype)
    np.add.at(mat, (np.arange(size_out), i0), 1 - lam)
    np.add.at(mat, (np.arange(size_out), i1), lam)
    return i0, i1, lam, mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of ``[N, C, H, W]`` with align-corners-false sampling.

    Output pixel ``o`` reads source coordinate ``(o + 0.5) * in / out - 0.5``
    (clamped to ``[0, in - 1]``) and linearly interpolates its two neighbours
    as ``a + t * (b - a)``, which keeps constants and same-size resizes exact.
    """
    x = as_tensor(x)
    _check_rank(x, 4, "bilinear_resize input")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target size must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return make_output(x.data.copy(), (x,), lambda g: (g,))
    dtype = x.data.dtype
    y0, y1, ly, my = _resize_plan(h, out_h, dtype)
    x0, x1, lx, mx = _resize_plan(w, out_w, dtype)
    d = x.data
    top, bot = d[:, :, y0, :], d[:, :, y1, :]
    rows = top + ly[:, None] * (bot - top)
    left, right = rows[:, :, :, x0], rows[:, :, :, x1]
    out = np.ascontiguousarray(left + lx * (right - left))

    def vjp(g):
        return (np.ascontiguousarray(np.matmul(np.matmul(my.T, g), mx)),)

    return make_output(out, (x,), vjp)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    x = as_tensor(x)
    _check_rank(x, 4, "avg_pool2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    quarter = x.data.dtype.type(0.25)

    def vjp(g):
        return (np.repeat(np.repeat(g * quarter, 2, axis=2), 2, axis=3),)

    return make_output(out, (x,), vjp)


# --------------------------------------------------------------------------
# normalisation kernels

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_output(out, (x,), vjp)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, epsilon: float):
    """Batch-statistics normalisation of ``[N, C, H, W]``.

    Returns ``(output, batch_mean, batch_var)``; the variance is the
    population variance over the ``N*H*W`` elements of each channel.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_rank(x, 4, "batch norm input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch norm: gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}")
    m = n * h * w
    if m < 2:
        raise ShapeError(f"batch norm: need at least 2 elements per channel, got {m}")
    d = x.data
    mean = d.mean(axis=(0, 2, 3))
    centered = d - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    eps = d.dtype.type(epsilon)
    std = np.sqrt(var + eps)
    xhat = centered / std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def vjp(g):
        gsum = g.sum(axis=(0, 2, 3))
        gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        dxhat_sum = gsum * gamma.data
        dxhat_xhat = gxhat_sum * gamma.data
        inv = (1 / std)[None, :, None, None]
        gx = inv / m * (m * dxhat - dxhat_sum[None, :, None, None] - xhat * dxhat_xhat[None, :, None, None])
        return gx, gxhat_sum, gsum

    return make_output(out, (x, gamma, beta), vjp), mean, var


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor, mean, var, epsilon: float) -> Tensor:
    """Normalise ``[N, C, H, W]`` with fixed per-channel statistics."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_rank(x, 4, "batch norm input")
    c = x.shape[1]
    d = x.data
    mean = np.asarray(mean, dtype=d.dtype)
    var = np.asarray(var, dtype=d.dtype)
    if mean.shape != (c,) or var.shape != (c,) or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch norm: per-channel parameters must have shape ({c},)")
    std = np.sqrt(var + d.dtype.type(epsilon))
    xhat = (d - mean[None, :, None, None]) / std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def vjp(g):
        gx = g * (gamma.data / std)[None, :, None, None]
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_output(out, (x, gamma, beta), vjp)


# --------------------------------------------------------------------------
# loss

def cross_entropy(logits: Tensor, mask, ignore_id: Optional[int] = None) -> Tensor:
    """Mean pixel cross-entropy of ``[N, C, H, W]`` logits against ``[N, H, W]`` ids.

    Pixels equal to ``ignore_id`` are excluded from the mean. With no valid
    pixel the loss is 0.
    """
    logits = as_tensor(logits)
    _check_rank(logits, 4, "cross_entropy logits")
    n, c, h, w = logits.shape
    mask = np.asarray(mask)
    if mask.shape != (n, h, w):
        raise ShapeError(f"cross_entropy: mask shape {mask.shape} != {(n, h, w)}")
    if not np.issubdtype(mask.dtype, np.integer):
        raise ValueError("cross_entropy: mask must hold integer class ids")
    valid = np.ones(mask.shape, dtype=bool) if ignore_id is None else mask != ignore_id
    if np.any(mask[valid] >= c) or np.any(mask[valid] < 0):
        raise ValueError(f"cross_entropy: mask ids must lie in [0, {c})")
    count = int(valid.sum())
    d = logits.data
    z = d - d.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    safe = np.where(valid, mask, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    dtype = d.dtype
    if count == 0:
        out = np.zeros((), dtype=dtype)
    else:
        out = np.asarray(-(picked[valid].sum() / dtype.type(count)), dtype=dtype)

    def vjp(g):
        if count == 0:
            return (np.zeros_like(d),)
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1, axis=1)
        grad *= valid[:, None]
        return (grad * (g / dtype.type(count)),)

    return make_output(out, (logits,), vjp)
