"""Differentiable primitives used by the reconstruction network and SSIM."""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _unbroadcast, as_tensor, concat

__all__ = [
    "conv2d",
    "complex_mul",
    "complex_conj_mul",
    "complex_abs2",
    "leaky_relu",
    "avg_pool2",
    "nearest_upsample2",
    "dropout",
    "concat_channels",
    "sqrt",
    "root_sum_squares",
    "box_filter",
]


def _as4d(x: Tensor):
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"conv2d expects [C,H,W] or [N,C,H,W], got {x.shape}")


def _conv_forward(x: np.ndarray, k: np.ndarray, padding: int) -> tuple[np.ndarray, np.ndarray]:
    kh, kw = k.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # [N, C, H', W', kh, kw]
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))  # [N, H', W', O]
    return out.transpose(0, 3, 1, 2), win


def conv2d(x, kernel, bias=None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` or ``[N, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, kh, kw]`` with odd spatial size.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    x4, squeeze = _as4d(x)
    c_out, c_in, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel spatial size must be odd, got {kh}x{kw}")
    if x4.shape[1] != c_in:
        raise ShapeError(f"kernel expects {c_in} input channels, input has {x4.shape[1]}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")

    xd, kd = x4.data, kernel.data
    out, win = _conv_forward(xd, kd, padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    h, w = xd.shape[2:]

    def bw(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [O, C, kh, kw]
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        gx = np.tensordot(gwin, kd[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
        gx = gx.transpose(0, 3, 1, 2)[:, :, padding : padding + h, padding : padding + w]
        grads = [np.ascontiguousarray(gx), gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x4, kernel) if bias is None else (x4, kernel, bias)
    res = Tensor._from_op(out, parents, bw, "conv2d")
    return res.reshape(res.shape[1:]) if squeeze else res


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape[-1] != 2 or b.shape[-1] != 2:
        raise ShapeError(f"complex operands need a trailing axis of 2, got {a.shape} and {b.shape}")


def _cmul(ar, ai, br, bi, conj_a: bool) -> np.ndarray:
    if conj_a:
        ai = -ai
    return np.stack([ar * br - ai * bi, ar * bi + ai * br], axis=-1)


def complex_mul(a, b) -> Tensor:
    """Elementwise complex product of broadcastable ``[..., 2]`` tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b)
    ad, bd = a.data, b.data
    out = _cmul(ad[..., 0], ad[..., 1], bd[..., 0], bd[..., 1], conj_a=False)

    def bw(g):
        gr, gi = g[..., 0], g[..., 1]
        ga = _cmul(bd[..., 0], bd[..., 1], gr, gi, conj_a=True)
        gb = _cmul(ad[..., 0], ad[..., 1], gr, gi, conj_a=True)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._from_op(out, (a, b), bw, "complex_mul")


def complex_conj_mul(a, b) -> Tensor:
    """Elementwise ``conj(a) * b``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b)
    ad, bd = a.data, b.data
    out = _cmul(ad[..., 0], ad[..., 1], bd[..., 0], bd[..., 1], conj_a=True)

    def bw(g):
        gr, gi = g[..., 0], g[..., 1]
        ga = _cmul(gr, gi, bd[..., 0], bd[..., 1], conj_a=True)
        gb = _cmul(ad[..., 0], ad[..., 1], gr, gi, conj_a=False)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._from_op(out, (a, b), bw, "complex_conj_mul")


def complex_abs2(x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != 2:
        raise ShapeError(f"complex operand needs a trailing axis of 2, got {x.shape}")
    return (x * x).sum(axis=-1)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return Tensor._from_op(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def avg_pool2(x) -> Tensor:
    """2x2 mean pooling over the last two axes."""
    x = as_tensor(x)
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return Tensor._from_op(out, (x,), bw, "avg_pool2")


def nearest_upsample2(x) -> Tensor:
    x = as_tensor(x)
    *lead, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def bw(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return Tensor._from_op(out, (x,), bw, "nearest_upsample2")


def dropout(x, p: float, rng: Optional[np.random.Generator] = None, training: bool = False) -> Tensor:
    """Inverted dropout; identity unless ``training`` is set.

    The sampled keep-mask is treated as a constant in the backward pass.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = ((rng.random(x.shape) >= p) / (1.0 - p)).astype(x.dtype)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def concat_channels(a, b) -> Tensor:
    """Concatenate along the channel axis (third from last)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return concat([a, b], axis=a.ndim - 3)


def sqrt(x) -> Tensor:
    """Square root whose derivative is taken as zero at exact zeros."""
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0).astype(out.dtype)
        return (g * d,)

    return Tensor._from_op(out, (x,), bw, "sqrt")


def root_sum_squares(x, axis=(0, -1)) -> Tensor:
    """``sqrt(sum(x**2, axis))`` with the bounded derivative ``x / out``.

    Chaining ``sqrt`` after a sum of squares forms ``0.5 / out`` first, which
    overflows in float32 for tiny magnitudes even though the product with
    ``2 x`` is at most one. The derivative is zero where ``out`` is exactly zero.
    """
    x = as_tensor(x)
    axes = tuple(int(a) % x.ndim for a in np.atleast_1d(axis))
    # scale by the largest magnitude first so tiny entries do not square to zero
    peak = np.abs(x.data).max(axis=axes, keepdims=True)
    safe = np.where(peak > 0, peak, 1).astype(x.dtype)
    unit = x.data / safe
    norm = np.sqrt((unit * unit).sum(axis=axes, keepdims=True))
    out = np.squeeze(norm * peak, axis=axes)

    def bw(g):
        d = np.where(peak > 0, unit / np.where(norm > 0, norm, 1), 0).astype(x.dtype)
        return (np.expand_dims(g, axes) * d,)

    return Tensor._from_op(out, (x,), bw, "root_sum_squares")


def box_filter(x, size: int) -> Tensor:
    """Valid-mode uniform mean over ``size x size`` windows of the last two axes."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if size % 2 == 0 or size > min(h, w):
        raise ShapeError(f"window {size} must be odd and fit in {h}x{w}")
    area = size * size
    out = sliding_window_view(x.data, (size, size), axis=(-2, -1)).sum(axis=(-2, -1)) / area
    nd = x.ndim

    def bw(g):
        pad = [(0, 0)] * (nd - 2) + [(size - 1, size - 1)] * 2
        gp = np.pad(g, pad)
        return (sliding_window_view(gp, (size, size), axis=(-2, -1)).sum(axis=(-2, -1)) / area,)

    return Tensor._from_op(out, (x,), bw, "box_filter")
