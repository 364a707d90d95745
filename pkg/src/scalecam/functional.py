"""Differentiable neural-network primitives on NCHW tensors.

Each function computes its forward value with numpy and records a
vector-Jacobian product on the active tape. Convolutions are
cross-correlations (no kernel flip); ``"same"`` padding follows the
TensorFlow rule of putting the odd extra pixel at the bottom/right.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, Tensor, _drop, _record, _wrap


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return math.ceil(size / stride)
    if padding == "valid":
        out = (size - kernel) // stride + 1
        if out < 1:
            raise ShapeError(f"kernel {kernel} larger than input extent {size}")
        return out
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _pads(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int, int]:
    out = conv_output_size(size, kernel, stride, padding)
    if padding == "valid":
        return out, 0, 0
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _check_stride(stride: int) -> None:
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")


def conv2d(x: Tensor, weights: Tensor, bias: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlate ``x`` [N,C,H,W] with ``weights`` [O,C,kh,kw]."""
    _check_stride(stride)
    if x.ndim != 4 or weights.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weights, got {x.shape} and {weights.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weights.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, weights expect {ci}")
    if padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
        raise ShapeError(f"same padding needs odd kernel extents, got {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {o} output channels")
    ho, pt, pb = _pads(h, kh, stride, padding)
    wo, pl, pr = _pads(w, kw, stride, padding)
    xd, wd = x.data, weights.data

    if kh == 1 and kw == 1:
        xs = xd[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.tensordot(xs, wd[:, :, 0, 0], axes=([1], [1])).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias.data[None, :, None, None]

        def vjp(g):
            gt = g.transpose(0, 2, 3, 1)
            dw = np.tensordot(gt, xs, axes=([0, 1, 2], [0, 2, 3]))[:, :, None, None]
            dxs = np.tensordot(gt, wd[:, :, 0, 0], axes=([3], [0])).transpose(0, 3, 1, 2)
            if stride == 1:
                dx = dxs
            else:
                dx = np.zeros(xd.shape, dtype=DTYPE)
                dx[:, :, ::stride, ::stride][:, :, :ho, :wo] = dxs
            db = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return _drop((dx, dw, db), x, weights, bias)

        return _record(_wrap(out), (x, weights, bias), vjp)

    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def vjp(g):
        gt = g.transpose(0, 2, 3, 1)
        dw = np.tensordot(gt, win, axes=([0, 1, 2], [0, 2, 3]))
        dwin = np.tensordot(gt, wd, axes=([3], [0]))  # N,Ho,Wo,C,kh,kw
        dxp = np.zeros(xp.shape, dtype=DTYPE)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + hs : stride, j : j + ws : stride] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pt : pt + h, pl : pl + w]
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return _drop((dx, dw, db), x, weights, bias)

    return _record(_wrap(out), (x, weights, bias), vjp)


def depthwise_conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Convolve each channel of ``x`` with its own kernel from ``kernels`` [C,kh,kw]."""
    _check_stride(stride)
    if x.ndim != 4 or kernels.ndim != 3:
        raise ShapeError(f"depthwise_conv2d expects [N,C,H,W] input and [C,kh,kw] kernels, got {x.shape} and {kernels.shape}")
    n, c, h, w = x.shape
    kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"depthwise_conv2d has {kc} kernels for {c} channels")
    if padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
        raise ShapeError(f"same padding needs odd kernel extents, got {kh}x{kw}")
    ho, pt, pb = _pads(h, kh, stride, padding)
    wo, pl, pr = _pads(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    kd = kernels.data
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    out = np.zeros((n, c, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + hs : stride, j : j + ws : stride] * kd[None, :, i, j, None, None]

    def vjp(g):
        dk = np.empty(kd.shape, dtype=DTYPE)
        dxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + hs, stride), slice(j, j + ws, stride))
                dk[:, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
                dxp[sl] += g * kd[None, :, i, j, None, None]
        return _drop((dxp[:, :, pt : pt + h, pl : pl + w], dk), x, kernels)

    return _record(_wrap(out), (x, kernels), vjp)


def _channel_view(arr: np.ndarray, ndim: int) -> np.ndarray:
    # per-channel vector shaped to line up with axis 1 of an [N,C] or [N,C,H,W] tensor
    return arr.reshape((1, -1) + (1,) * (ndim - 2))


def _stat_axes(ndim: int) -> tuple[int, ...]:
    if ndim == 2:
        return (0,)
    if ndim == 4:
        return (0, 2, 3)
    raise ShapeError(f"batch_norm expects [N,C] or [N,C,H,W] input, got rank {ndim}")


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, epsilon: float = 1e-3):
    """Normalize by batch statistics.

    Returns ``(output, batch_mean, batch_var)``; the statistics are plain
    arrays (population variance) for the caller's running-average update.
    """
    axes = _stat_axes(x.ndim)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    m = xd.size // c
    mean = xd.mean(axis=axes)
    centered = xd - _channel_view(mean, x.ndim)
    var = np.mean(centered * centered, axis=axes)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = centered * _channel_view(inv, x.ndim)
    gd = gamma.data
    out = xhat * _channel_view(gd, x.ndim) + _channel_view(beta.data, x.ndim)

    def vjp(g):
        dgamma = np.sum(g * xhat, axis=axes)
        dbeta = np.sum(g, axis=axes)
        dxhat = g * _channel_view(gd, x.ndim)
        s1 = _channel_view(np.sum(dxhat, axis=axes), x.ndim)
        s2 = _channel_view(np.sum(dxhat * xhat, axis=axes), x.ndim)
        dx = _channel_view(inv / m, x.ndim) * (m * dxhat - s1 - xhat * s2)
        return _drop((dx, dgamma, dbeta), x, gamma, beta)

    return _record(_wrap(out), (x, gamma, beta), vjp), mean, var


def batch_norm_infer(
    x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray, epsilon: float = 1e-3
) -> Tensor:
    axes = _stat_axes(x.ndim)
    c = x.shape[1]
    if gamma.shape != (c,) or np.shape(running_mean) != (c,):
        raise ShapeError(f"batch_norm: {c} channels but state sized {gamma.shape}")
    inv = 1.0 / np.sqrt(np.asarray(running_var) + epsilon)
    xhat = (x.data - _channel_view(np.asarray(running_mean), x.ndim)) * _channel_view(inv, x.ndim)
    gd = gamma.data
    out = xhat * _channel_view(gd, x.ndim) + _channel_view(beta.data, x.ndim)

    def vjp(g):
        dx = g * _channel_view(gd * inv, x.ndim)
        return _drop((dx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)), x, gamma, beta)

    return _record(_wrap(out), (x, gamma, beta), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    z = h * w
    return _record(_wrap(out), (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / z, x.shape),))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel (axis 1) bias to an [N,C] or [N,C,H,W] tensor."""
    if x.ndim not in (2, 4) or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit input {x.shape}")
    out = x.data + _channel_view(bias.data, x.ndim)
    axes = _stat_axes(x.ndim)
    return _record(_wrap(out), (x, bias), lambda g: _drop((g, g.sum(axis=axes)), x, bias))


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """[N,in] @ [in,out] (+ bias)."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: cannot apply weights {weights.shape} to input {x.shape}")
    xd, wd = x.data, weights.data
    out = xd @ wd
    if bias is not None:
        if bias.shape != (wd.shape[1],):
            raise ShapeError(f"dense: bias {bias.shape} does not match {wd.shape[1]} outputs")
        out = out + bias.data[None, :]

    def vjp(g):
        db = g.sum(axis=0) if bias is not None else None
        return _drop((g @ wd.T, xd.T @ g, db), x, weights, bias)

    return _record(_wrap(out), (x, weights, bias), vjp)


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply each [H,W] plane of ``x`` [N,C,H,W] by ``gate`` [N,C]."""
    if x.ndim != 4 or gate.shape != x.shape[:2]:
        raise ShapeError(f"scale_channels: gate {gate.shape} does not fit input {x.shape}")
    xd, gd = x.data, gate.data
    out = xd * gd[:, :, None, None]

    def vjp(g):
        return _drop((g * gd[:, :, None, None], np.einsum("nchw,nchw->nc", g, xd)), x, gate)

    return _record(_wrap(out), (x, gate), vjp)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of an [N,K] tensor."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects [N,K], got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    return _record(_wrap(y), (logits,), vjp)


def dropout(x: Tensor, rate: float, generator: np.random.Generator) -> Tensor:
    """Inverted dropout; caller decides whether training is active."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (generator.random(x.shape) >= rate) / (1.0 - rate)
    return _record(_wrap(x.data * keep), (x,), lambda g: (g * keep,))
