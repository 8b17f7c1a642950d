"""Differentiable primitives.

Every function takes and returns :class:`~xcit.tensor.Tensor` objects and
registers an analytic vector-Jacobian product with the active tape.
Leading axes broadcast the way numpy does; adjoints are summed back down to
the input shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ShapeError
from .tensor import Tensor, as_tensor, make_result

EPS_NORM = 1e-12
EPS_LN = 1e-6
BN_MOMENTUM = 0.1

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    out = np.matmul(A, B)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(B, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(A, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, A.shape),
            None if gb is None else _unbroadcast(gb, B.shape),
        )

    return make_result(out, (a, b), vjp, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return make_result(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return make_result(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub"
    )


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar."""
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")
    b = as_tensor(b)
    A, B = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * B, A.shape) if a.requires_grad else None,
            _unbroadcast(g * A, B.shape) if b.requires_grad else None,
        )

    return make_result(A * B, (a, b), vjp, "mul")


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- shape plumbing


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return make_result(out, (x,), lambda g: (np.transpose(g, inv),), "permute")


def swap_last(x) -> Tensor:
    nd = as_tensor(x).ndim
    return permute(x, tuple(range(nd - 2)) + (nd - 1, nd - 2))


def index(x, key) -> Tensor:
    """Basic (slice/int) indexing."""
    x = as_tensor(x)
    out = x.data[key]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return make_result(np.array(out, copy=True), (x,), vjp, "index")


def concat(xs, axis: int) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, xs, vjp, "concat")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return make_result(
        np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
    )


def mean_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return make_result(x.data.mean(axis=axis), (x,), vjp, "mean")


# ---------------------------------------------------------------- nonlinearities


def softmax_last_axis(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), vjp, "softmax")


def l2_normalize_axis(x, axis: int = -1, eps: float = EPS_NORM) -> Tensor:
    """Scale each slice along ``axis`` to unit Euclidean norm; slices with
    norm below ``eps`` are divided by ``eps`` instead."""
    x = as_tensor(x)
    X = x.data
    norm = np.sqrt((X * X).sum(axis=axis, keepdims=True))
    big = norm >= eps
    denom = np.where(big, norm, eps)
    y = X / denom

    def vjp(g):
        radial = np.where(big, (y * g).sum(axis=axis, keepdims=True), 0.0)
        return ((g - y * radial) / denom,)

    return make_result(y, (x,), vjp, "l2_normalize")


def gelu(x) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    X = x.data
    cdf = 0.5 * (1.0 + erf(X / _SQRT2))

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * X * X)
        return (g * (cdf + X * pdf),)

    return make_result(X * cdf, (x,), vjp, "gelu")


# ---------------------------------------------------------------- normalization


def layer_norm(x, gain, bias, eps: float = EPS_LN) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input width {d} vs gain {gain.shape} / bias {bias.shape}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    lead = tuple(range(X.ndim - 1))

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gain, bias), vjp, "layer_norm")


@dataclass
class BatchNormStats:
    """Running per-channel statistics, updated in place by train-mode calls."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def init(cls, channels: int, dtype=np.float64, momentum: float = BN_MOMENTUM):
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), momentum)


def batch_norm_2d(x, gain, bias, stats: BatchNormStats, mode: str = "eval",
                  eps: float = EPS_LN) -> Tensor:
    """Per-channel normalization of a B x C x H x W tensor.

    Train mode normalizes with the biased batch variance and folds the batch
    mean/variance into ``stats`` with the configured momentum.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm_2d expects B x C x H x W, got {x.shape}")
    C = x.shape[1]
    if stats.mean.shape != (C,) or gain.shape != (C,):
        raise ShapeError(f"batch_norm_2d: {C} channels vs stats {stats.mean.shape}")
    X = x.data
    cshape = (1, C, 1, 1)
    red = (0, 2, 3)
    gw = gain.data.reshape(cshape)
    if mode == "train":
        mu = X.mean(axis=red, keepdims=True)
        xc = X - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        m = stats.momentum
        stats.mean[...] = (1 - m) * stats.mean + m * mu.reshape(C)
        stats.var[...] = (1 - m) * stats.var + m * var.reshape(C)

        def vjp(g):
            gh = g * gw
            gx = rstd * (
                gh
                - gh.mean(axis=red, keepdims=True)
                - xhat * (gh * xhat).mean(axis=red, keepdims=True)
            )
            return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    elif mode == "eval":
        rstd = (1.0 / np.sqrt(stats.var + eps)).reshape(cshape).astype(X.dtype)
        xhat = (X - stats.mean.reshape(cshape)) * rstd

        def vjp(g):
            return g * gw * rstd, (g * xhat).sum(axis=red), g.sum(axis=red)

    else:
        raise ValueError(f"unknown mode {mode!r}; expected 'train' or 'eval'")
    out = xhat * gw + bias.data.reshape(cshape)
    return make_result(out, (x, gain, bias), vjp, "batch_norm_2d")


# ---------------------------------------------------------------- convolutions


def depthwise_conv3x3(x, w, b) -> Tensor:
    """Per-channel 3x3 convolution, stride 1, zero padding 1."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.shape != (x.shape[1], 3, 3) or b.shape != (x.shape[1],):
        raise ShapeError(f"depthwise_conv3x3: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    K = w.data
    out = np.broadcast_to(b.data.reshape(1, C, 1, 1), x.shape).copy()
    for di in range(3):
        for dj in range(3):
            out += xp[:, :, di:di + H, dj:dj + W] * K[:, di, dj].reshape(1, C, 1, 1)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(K)
        for di in range(3):
            for dj in range(3):
                gxp[:, :, di:di + H, dj:dj + W] += g * K[:, di, dj].reshape(1, C, 1, 1)
                gw[:, di, dj] = (g * xp[:, :, di:di + H, dj:dj + W]).sum(axis=(0, 2, 3))
        return gxp[:, :, 1:H + 1, 1:W + 1], gw, g.sum(axis=(0, 2, 3))

    return make_result(out, (x, w, b), vjp, "depthwise_conv3x3")


def conv2d(x, w, b, stride: int = 2, padding: int = 1) -> Tensor:
    """Dense convolution via im2col; ``w`` is Cout x Cin x k x k."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape}, kernel {w.shape}")
    B, Cin, H, W = x.shape
    Cout, _, k, _ = w.shape
    s, p = stride, padding
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {H}x{W} too small for kernel {k}, stride {s}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    # cols: B x Ho x Wo x (Cin*k*k), channel-major to match w.reshape(Cout, -1)
    cols = np.empty((B, Ho, Wo, Cin, k, k), dtype=xp.dtype)
    for di in range(k):
        for dj in range(k):
            patch = xp[:, :, di:di + s * (Ho - 1) + 1:s, dj:dj + s * (Wo - 1) + 1:s]
            cols[..., di, dj] = patch.transpose(0, 2, 3, 1)
    cols = cols.reshape(B, Ho, Wo, Cin * k * k)
    Wm = w.data.reshape(Cout, -1)
    out = (cols @ Wm.T + b.data).transpose(0, 3, 1, 2)

    def vjp(g):
        gt = g.transpose(0, 2, 3, 1)  # B x Ho x Wo x Cout
        gw = np.tensordot(gt, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (gt @ Wm).reshape(B, Ho, Wo, Cin, k, k)
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + s * (Ho - 1) + 1:s, dj:dj + s * (Wo - 1) + 1:s] += (
                        gcols[..., di, dj].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, p:p + H, p:p + W]
        return gx, gw, gt.sum(axis=(0, 1, 2))

    return make_result(np.ascontiguousarray(out), (x, w, b), vjp, "conv2d")


# ---------------------------------------------------------------- losses


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of B x K logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    L = logits.data
    if L.ndim != 2 or labels.shape != (L.shape[0],):
        raise ShapeError(f"cross_entropy: logits {L.shape}, labels {labels.shape}")
    z = L - L.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = L.shape[0]
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return make_result(np.asarray(loss), (logits,), vjp, "cross_entropy")
