"""Activations, normalization, spatial kernels and the BCE loss.

Most operations here have a fused forward/backward pair instead of being
composed from the primitives in :mod:`fspnet.tensor`; the gradient suite
checks each of them against central differences.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .tensor import ShapeError, Tensor, as_tensor, matmul

LAYER_NORM_EPS = 1e-6
BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1
BCE_EPS = 1e-7


def _check_axis(x: Tensor, axis: int, op: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


# -- activations -------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), backward)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return Tensor._make(xd * cdf, (x,), backward)


# -- normalization -------------------------------------------------------------


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: feature axis {d} does not match parameters {weight.shape}, {bias.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * weight.data + bias.data
    w = weight.data

    def backward(g):
        gx = gw = gb = None
        lead = tuple(range(g.ndim - 1))
        if x.requires_grad:
            dxhat = g * w
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if weight.requires_grad:
            gw = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gb = g.sum(axis=lead)
        return gx, gw, gb

    return Tensor._make(out, (x, weight, bias), backward)


def batch_norm_2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: Optional[np.ndarray],
    running_var: Optional[np.ndarray],
    training: bool,
    momentum: float = BATCH_NORM_MOMENTUM,
    eps: float = BATCH_NORM_EPS,
) -> Tensor:
    """Per-channel normalization of a (B, C, H, W) tensor.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is conventional).
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm_2d: expected (B, C, H, W), got {x.shape}")
    c = x.shape[1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"batch_norm_2d: {c} channels do not match parameters {weight.shape}, {bias.shape}"
        )
    axes = (0, 2, 3)
    xd = x.data
    if training:
        n = xd.size // c
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        if running_mean is not None and running_var is not None:
            unbiased = var.reshape(c) * (n / max(n - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm_2d: eval mode needs initialized running statistics")
        mu = running_mean.reshape(1, c, 1, 1)
        var = running_var.reshape(1, c, 1, 1)
        xc = xd - mu
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    w = weight.data.reshape(1, c, 1, 1)
    out = xhat * w + bias.data.reshape(1, c, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            dxhat = g * w
            if training:
                gx = inv_std * (
                    dxhat
                    - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * inv_std
        if weight.requires_grad:
            gw = (g * xhat).sum(axis=axes)
        if bias.requires_grad:
            gb = g.sum(axis=axes)
        return gx, gw, gb

    return Tensor._make(out, (x, weight, bias), backward)


# -- spatial -------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) with zero padding.

    x: (B, Cin, H, W); weight: (Cout, Cin, k, k) with odd k.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape}, {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel {weight.shape} expects {wcin}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {weight.shape}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    wmat = weight.data.reshape(cout, cin * k * k)

    if k == 1:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    else:
        p = k // 2
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, Cin, H, W, k, k
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, cin * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, h, w, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = g2 @ wmat
            if k == 1:
                gx = gcols.reshape(b, h, w, cin).transpose(0, 3, 1, 2)
            else:
                gcols = gcols.reshape(b, h, w, cin, k, k)
                gxp = np.zeros((b, cin, h + 2 * p, w + 2 * p))
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + h, j : j + w] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, p : p + h, p : p + w]
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._make(out, parents, backward)


@lru_cache(maxsize=64)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix (n_out, n_in) for half-pixel-centred bilinear resizing."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m.setflags(write=False)
    return m


def bilinear_resize(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Resize the last two axes of x to (target_h, target_w)."""
    if x.ndim < 2:
        raise ShapeError(f"bilinear_resize: need at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (target_h, target_w):
        return x
    rh = bilinear_matrix(h, target_h)
    rw = bilinear_matrix(w, target_w)
    out = np.matmul(np.matmul(rh, x.data), rw.T)

    def backward(g):
        return (np.matmul(np.matmul(rh.T, g), rw),)

    return Tensor._make(out, (x,), backward)


def upsample_2x(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return bilinear_resize(x, 2 * h, 2 * w)


@lru_cache(maxsize=64)
def pooling_matrix(length: int, bins: int) -> np.ndarray:
    """Averaging matrix (bins, length); bin n covers rows floor(n*l/k) .. floor((n+1)*l/k)."""
    m = np.zeros((bins, length))
    for n in range(bins):
        lo, hi = (n * length) // bins, ((n + 1) * length) // bins
        m[n, lo:hi] = 1.0 / (hi - lo)
    m.setflags(write=False)
    return m


def adaptive_avg_pool_seq(tokens: Tensor, bins: int) -> Tensor:
    """Average contiguous row bins of a (..., l, d) token matrix down to (..., bins, d)."""
    length = tokens.shape[-2]
    if bins > length:
        raise ShapeError(f"adaptive_avg_pool_seq: {bins} bins exceed sequence length {length}")
    if bins < 1:
        raise ShapeError(f"adaptive_avg_pool_seq: bins must be positive, got {bins}")
    return matmul(Tensor(pooling_matrix(length, bins)), tokens)


# -- loss ---------------------------------------------------------------------------


def bce(prediction: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [eps, 1 - eps]."""
    target = as_tensor(target)
    if prediction.shape != target.shape:
        raise ShapeError(f"bce: prediction {prediction.shape} and target {target.shape} differ")
    p = np.clip(prediction.data, eps, 1.0 - eps)
    t = target.data
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    inside = (prediction.data >= eps) & (prediction.data <= 1.0 - eps)

    def backward(g):
        return (g * inside * (-t / p + (1.0 - t) / (1.0 - p)) / n, None)

    return Tensor._make(np.asarray(loss), (prediction, target), backward)


__all__ = [
    "relu",
    "sigmoid",
    "softmax",
    "gelu",
    "layer_norm",
    "batch_norm_2d",
    "conv2d",
    "bilinear_resize",
    "upsample_2x",
    "adaptive_avg_pool_seq",
    "bce",
    "bilinear_matrix",
    "pooling_matrix",
]
