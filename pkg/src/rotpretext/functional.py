"""Differentiable network primitives on ``Tensor``.

Layouts follow the video convention used everywhere in the package:
activations are ``(N, C, T, H, W)`` and conv weights ``(C_out, C_in, kT, kH, kW)``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, get_tape

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t  # type: ignore[return-value]


def out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv_output_shape(in_thw: Sequence[int], kernel, stride, padding) -> Triple:
    k, s, p = _triple(kernel), _triple(stride), _triple(padding)
    return tuple(out_extent(n, k[i], s[i], p[i]) for i, n in enumerate(in_thw))  # type: ignore[return-value]


def _pad5(x: np.ndarray, p: Triple, value: float = 0.0) -> np.ndarray:
    if p == (0, 0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])), constant_values=value)


def _unpad5(x: np.ndarray, p: Triple) -> np.ndarray:
    if p == (0, 0, 0):
        return x
    T, H, W = x.shape[2:]
    return x[:, :, p[0] : T - p[0], p[1] : H - p[1], p[2] : W - p[2]]


def _window(xp: np.ndarray, offset: Triple, stride: Triple, out: Triple) -> tuple:
    a, b, c = offset
    return (
        slice(None),
        slice(None),
        slice(a, a + stride[0] * (out[0] - 1) + 1, stride[0]),
        slice(b, b + stride[1] * (out[1] - 1) + 1, stride[1]),
        slice(c, c + stride[2] * (out[2] - 1) + 1, stride[2]),
    )


def _offsets(kernel: Triple):
    for a in range(kernel[0]):
        for b in range(kernel[1]):
            for c in range(kernel[2]):
                yield a, b, c


def _check_conv_args(x: Tensor, weight: Tensor, bias: Tensor | None, stride, padding):
    if weight.ndim != 5:
        raise ValueError(f"conv3d weight must be 5-d (C_out, C_in, kT, kH, kW), got {weight.shape}")
    if x.ndim != 5:
        raise ValueError(f"conv3d input must be (N, C, T, H, W), got {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv3d channel mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[1]} "
            f"(input {x.shape}, weight {weight.shape})"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv3d bias must have shape ({weight.shape[0]},), got {bias.shape}")
    s, p = _triple(stride), _triple(padding)
    if min(s) < 1:
        raise ValueError(f"conv3d strides must be >= 1, got {s}")
    k = weight.shape[2:]
    for i in range(3):
        if k[i] > x.shape[2 + i] + 2 * p[i]:
            raise ValueError(f"conv3d kernel {k} larger than padded input {x.shape[2:]} with padding {p}")
    return s, p


def im2col(xp: np.ndarray, kernel: Triple, stride: Triple, out: Triple) -> np.ndarray:
    """Unfold a padded ``(N, C, T, H, W)`` volume into ``(N, C*kT*kH*kW, oT*oH*oW)``."""
    N, C = xp.shape[:2]
    cols = np.empty((N, C, *kernel, *out), dtype=xp.dtype)
    for off in _offsets(kernel):
        cols[(slice(None), slice(None), *off)] = xp[_window(xp, off, stride, out)]
    return cols.reshape(N, C * kernel[0] * kernel[1] * kernel[2], out[0] * out[1] * out[2])


def col2im(cols: np.ndarray, padded_shape: tuple, kernel: Triple, stride: Triple, out: Triple) -> np.ndarray:
    N, C = padded_shape[:2]
    cols = cols.reshape(N, C, *kernel, *out)
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for off in _offsets(kernel):
        xp[_window(xp, off, stride, out)] += cols[(slice(None), slice(None), *off)]
    return xp


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, method: str = "im2col") -> Tensor:
    """3D convolution (cross-correlation). Accepts ``(C, T, H, W)`` or batched input.

    ``method="im2col"`` unfolds the input and does one matmul; ``method="direct"``
    accumulates one small contraction per kernel offset. Both are differentiable.
    """
    if x.ndim == 4:
        return _squeeze0(conv3d(_unsqueeze0(x), weight, bias, stride, padding, method))
    s, p = _check_conv_args(x, weight, bias, stride, padding)
    k: Triple = tuple(weight.shape[2:])  # type: ignore[assignment]
    N = x.shape[0]
    C_out = weight.shape[0]
    out = conv_output_shape(x.shape[2:], k, s, p)
    xp = _pad5(x.data, p)
    w = weight.data

    if method == "im2col":
        cols = im2col(xp, k, s, out)
        wm = w.reshape(C_out, -1)
        y = np.matmul(wm, cols).reshape(N, C_out, *out)
    elif method == "direct":
        cols = None
        y = np.zeros((N, C_out, *out), dtype=xp.dtype)
        for off in _offsets(k):
            win = xp[_window(xp, off, s, out)]
            y += np.einsum("oi,nithw->nothw", w[(slice(None), slice(None), *off)], win, optimize=True)
    else:
        raise ValueError(f"unknown conv3d method {method!r}")
    if bias is not None:
        y += bias.data.reshape(1, C_out, 1, 1, 1)
    result = Tensor(y, dtype=xp.dtype)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = gw = None
        if method == "im2col":
            gm = g.reshape(N, C_out, -1)
            if weight.requires_grad:
                gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            if x.requires_grad:
                gx = _unpad5(col2im(np.matmul(wm.T, gm), xp.shape, k, s, out), p)
        else:
            gxp = np.zeros_like(xp) if x.requires_grad else None
            gw = np.zeros_like(w) if weight.requires_grad else None
            for off in _offsets(k):
                sl = _window(xp, off, s, out)
                widx = (slice(None), slice(None), *off)
                if gw is not None:
                    gw[widx] = np.einsum("nothw,nithw->oi", g, xp[sl], optimize=True)
                if gxp is not None:
                    gxp[sl] += np.einsum("oi,nothw->nithw", w[widx], g, optimize=True)
            gx = _unpad5(gxp, p) if gxp is not None else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return get_tape().record(result, inputs, bw)


def _unsqueeze0(x: Tensor) -> Tensor:
    return x.reshape((1, *x.shape))


def _squeeze0(x: Tensor) -> Tensor:
    return x.reshape(x.shape[1:])


class BatchNormStats:
    """Running mean/variance of a batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: BatchNormStats,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel normalisation over ``(N, T, H, W)``.

    Training mode normalises with batch statistics and, when ``update_stats``,
    blends them into ``stats`` (``running = (1 - momentum) * running + momentum * batch``,
    unbiased variance). Eval mode uses ``stats`` as-is.
    """
    if eps <= 0:
        raise ValueError(f"batchnorm3d epsilon must be > 0, got {eps}")
    if x.ndim != 5:
        raise ValueError(f"batchnorm3d input must be (N, C, T, H, W), got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batchnorm3d gamma/beta must have shape ({C},)")
    axes = (0, 2, 3, 4)
    m = x.size // C
    bshape = (1, C, 1, 1, 1)
    xd = x.data

    if training:
        if m < 2:
            raise ValueError("batchnorm3d in train mode needs N*T*H*W >= 2")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if update_stats:
            stats.mean[:] = (1 - momentum) * stats.mean + momentum * mu
            stats.var[:] = (1 - momentum) * stats.var + momentum * var * (m / (m - 1))
    else:
        mu = stats.mean.astype(xd.dtype)
        var = stats.var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    out = Tensor(y, dtype=xd.dtype)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return get_tape().record(out, (x, gamma, beta), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype), dtype=x.dtype)
    return get_tape().record(out, (x,), lambda g: (g * mask,))


def maxpool3d(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    """Windowed maximum. Gradient goes to the first maximal element in scan order."""
    k = _triple(kernel)
    s = _triple(stride) if stride is not None else k
    p = _triple(padding)
    if x.ndim != 5:
        raise ValueError(f"maxpool3d input must be (N, C, T, H, W), got {x.shape}")
    for i in range(3):
        if k[i] > x.shape[2 + i] + 2 * p[i]:
            raise ValueError(f"maxpool3d kernel {k} larger than input {x.shape[2:]}")
    out = conv_output_shape(x.shape[2:], k, s, p)
    xp = _pad5(x.data, p, value=-np.inf)
    best = None
    arg = None
    for idx, off in enumerate(_offsets(k)):
        win = xp[_window(xp, off, s, out)]
        if best is None:
            best = win.copy()
            arg = np.zeros(best.shape, dtype=np.int32)
        else:
            better = win > best
            best[better] = win[better]
            arg[better] = idx
    result = Tensor(best, dtype=x.dtype)

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx, off in enumerate(_offsets(k)):
            gxp[_window(xp, off, s, out)] += np.where(arg == idx, g, 0)
        return (_unpad5(gxp, p),)

    return get_tape().record(result, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 5:
        raise ValueError(f"global_avg_pool input must be (N, C, T, H, W), got {x.shape}")
    shape = x.shape
    vol = shape[2] * shape[3] * shape[4]
    out = Tensor(x.data.mean(axis=(2, 3, 4)), dtype=x.dtype)

    def bw(g):
        return (np.broadcast_to((g / vol)[:, :, None, None, None], shape).copy(),)

    return get_tape().record(out, (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y, dtype=x.dtype)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return get_tape().record(out, inputs, bw)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be (N, K), got {logits.shape}")
    N, K = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != N:
        raise ValueError(f"got {y.shape[0]} labels for {N} rows of logits")
    if y.size and (y.min() < 0 or y.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{y.min()}, {y.max()}]")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(N), y].mean()
    out = Tensor(loss, dtype=logits.dtype)

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(N), y] -= 1
        return (grad * (g / N),)

    return get_tape().record(out, (logits,), bw)


def regression_loss(prediction: Tensor, target: Sequence[float], norm: str = "l2") -> Tensor:
    """Mean absolute (``l1``) or squared (``l2``) error against scalar targets."""
    p = prediction.data.reshape(-1)
    y = np.asarray(target, dtype=prediction.dtype).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"regression_loss: {p.size} predictions vs {y.size} targets")
    n = p.size
    d = p - y
    if norm == "l2":
        loss = (d * d).mean()
    elif norm == "l1":
        loss = np.abs(d).mean()
    else:
        raise ValueError(f"norm must be 'l1' or 'l2', got {norm!r}")
    out = Tensor(loss, dtype=prediction.dtype)
    shape = prediction.shape

    def bw(g):
        gd = 2 * d if norm == "l2" else np.sign(d)
        return ((gd * (g / n)).reshape(shape),)

    return get_tape().record(out, (prediction,), bw)
