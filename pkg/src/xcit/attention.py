"""Cross-covariance attention (XCA), token self-attention and class attention.

All three share one convention: a fused ``d -> 3d`` query/key/value
projection whose columns are laid out ``[q heads | k heads | v heads]``,
followed by a ``d -> d`` output projection with bias.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .nn import Linear, Module
from .tensor import Param, Tensor


def _check_heads(d: int, h: int) -> int:
    if h < 1 or d % h:
        raise ConfigError(f"width d={d} is not divisible by heads h={h}")
    return d // h


class XcaHeadWeights(Module):
    """Per-head projections, per-head temperature and output projection.

    ``inner`` is the concatenated head width (``d`` for a normal block); a
    narrower ``inner`` describes a slice of heads, see :meth:`head_slice`.
    """

    def __init__(self, d: int, h: int, rng: np.random.Generator, dtype=np.float64,
                 inner: int | None = None):
        inner = d if inner is None else inner
        self.d, self.h, self.inner = d, h, inner
        self.head_dim = _check_heads(inner, h)
        self.qkv = Linear(d, 3 * inner, rng, dtype=dtype)
        self.temp = Param(np.ones(h, dtype))
        self.proj = Linear(inner, d, rng, dtype=dtype)

    def projection(self, which: str, head: int) -> np.ndarray:
        """The d x (d/h) block W_q/W_k/W_v of one head, as a view."""
        col = {"q": 0, "k": 1, "v": 2}[which] * self.inner + head * self.head_dim
        return self.qkv.weight.data[:, col:col + self.head_dim]

    def head_slice(self, head: int) -> "XcaHeadWeights":
        """Single-head weights copied from head ``head`` of this block."""
        dh = self.head_dim
        sub = XcaHeadWeights.__new__(XcaHeadWeights)
        sub.d, sub.h, sub.inner, sub.head_dim = self.d, 1, dh, dh
        sub.qkv = Linear.__new__(Linear)
        cols = np.concatenate([np.arange(j * self.inner + head * dh, j * self.inner + (head + 1) * dh)
                               for j in range(3)])
        sub.qkv.weight = Param(self.qkv.weight.data[:, cols])
        sub.qkv.bias = Param(self.qkv.bias.data[cols])
        sub.temp = Param(self.temp.data[head:head + 1])
        sub.proj = Linear.__new__(Linear)
        sub.proj.weight = Param(self.proj.weight.data[head * dh:(head + 1) * dh])
        sub.proj.bias = Param(self.proj.bias.data)
        return sub


class TokenAttnWeights(Module):
    def __init__(self, d: int, h: int, rng: np.random.Generator, dtype=np.float64):
        self.d, self.h = d, h
        self.head_dim = _check_heads(d, h)
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.qkv = Linear(d, 3 * d, rng, dtype=dtype)
        self.proj = Linear(d, d, rng, dtype=dtype)


class XcaParts(NamedTuple):
    mixed: Tensor      # ... x N x inner, before the output projection
    maps: Tensor       # ... x h x dh x dh, post-softmax
    crosscov: Tensor   # ... x h x dh x dh, normalized K^T Q before temperature


def xca_parts(X, w: XcaHeadWeights) -> XcaParts:
    X = X if isinstance(X, Tensor) else Tensor(X)
    *lead, N, d = X.shape
    if d != w.d:
        raise ShapeError(f"xca: input width {d} != weight width {w.d}")
    h, dh = w.h, w.head_dim
    nl = len(lead)
    qkv = w.qkv(X)
    qkv = ops.reshape(qkv, (*lead, N, 3, h, dh))
    # -> 3 x ... x h x dh x N
    qkv = ops.permute(qkv, (nl + 1, *range(nl), nl + 2, nl + 3, nl))
    q = ops.l2_normalize_axis(ops.index(qkv, 0), axis=-1)
    k = ops.l2_normalize_axis(ops.index(qkv, 1), axis=-1)
    v = ops.index(qkv, 2)
    # entry (i, j) = <k_i, q_j>; every entry lies in [-1, 1]
    crosscov = ops.matmul(k, ops.swap_last(q))
    logits = ops.mul(crosscov, ops.reshape(w.temp, (h, 1, 1)))
    maps = ops.softmax_last_axis(logits)
    # each output channel is a convex combination of the value channels
    out = ops.matmul(maps, v)
    out = ops.permute(out, (*range(nl), nl + 2, nl, nl + 1))
    mixed = ops.reshape(out, (*lead, N, w.inner))
    return XcaParts(mixed, maps, crosscov)


def xca_forward(X, w: XcaHeadWeights) -> tuple[Tensor, Tensor]:
    """XCA over ``... x N x d`` tokens; returns (output, per-head maps)."""
    parts = xca_parts(X, w)
    return w.proj(parts.mixed), parts.maps


def _split_heads(t: Tensor, lead, n: int, h: int, dh: int) -> Tensor:
    # ... x n x (3 h dh) -> 3 x ... x h x n x dh
    nl = len(lead)
    t = ops.reshape(t, (*lead, n, 3, h, dh))
    return ops.permute(t, (nl + 1, *range(nl), nl + 2, nl, nl + 3))


def token_attention_forward(X, w: TokenAttnWeights, head_chunk: int | None = None) -> Tensor:
    """Multi-head softmax(Q K^T / sqrt(d_k)) V over tokens.

    ``head_chunk`` bounds how many heads' N x N maps are alive at once; the
    result does not depend on it.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    *lead, N, d = X.shape
    if d != w.d:
        raise ShapeError(f"token attention: input width {d} != weight width {w.d}")
    h, dh = w.h, w.head_dim
    nl = len(lead)
    qkv = _split_heads(w.qkv(X), lead, N, h, dh)
    step = h if head_chunk is None else max(1, head_chunk)
    outs = []
    for g0 in range(0, h, step):
        sl = (Ellipsis, slice(g0, min(h, g0 + step)), slice(None), slice(None))
        q = ops.index(qkv, (0, *sl))
        k = ops.index(qkv, (1, *sl))
        v = ops.index(qkv, (2, *sl))
        attn = ops.softmax_last_axis(ops.mul(ops.matmul(q, ops.swap_last(k)), w.scale))
        outs.append(ops.matmul(attn, v))
    out = outs[0] if len(outs) == 1 else ops.concat(outs, axis=nl)
    out = ops.permute(out, (*range(nl), nl + 1, nl, nl + 2))
    return w.proj(ops.reshape(out, (*lead, N, d)))


def class_attention_forward(cls, patches, w: TokenAttnWeights) -> tuple[Tensor, Tensor]:
    """One-way attention from the class token to [cls; patches].

    Returns the updated ``... x 1 x d`` class row and the per-head weights
    ``... x h x (N+1)``; column 0 is the class token itself. Patches are
    read, never written.
    """
    cls = cls if isinstance(cls, Tensor) else Tensor(cls)
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    d, h, dh = w.d, w.h, w.head_dim
    *lead, one, dc = cls.shape
    if one != 1 or dc != d or patches.shape[-1] != d:
        raise ShapeError(f"class attention: cls {cls.shape}, patches {patches.shape}, d={d}")
    nl = len(lead)
    u = ops.concat([cls, patches], axis=-2)
    M = u.shape[-2]
    Wq = ops.index(w.qkv.weight, (slice(None), slice(0, d)))
    bq = ops.index(w.qkv.bias, slice(0, d))
    Wkv = ops.index(w.qkv.weight, (slice(None), slice(d, 3 * d)))
    bkv = ops.index(w.qkv.bias, slice(d, 3 * d))
    q = ops.linear(cls, Wq, bq)                                   # ... x 1 x d
    q = ops.permute(ops.reshape(q, (*lead, 1, h, dh)), (*range(nl), nl + 1, nl, nl + 2))
    kv = ops.reshape(ops.linear(u, Wkv, bkv), (*lead, M, 2, h, dh))
    kv = ops.permute(kv, (nl + 1, *range(nl), nl + 2, nl, nl + 3))  # 2 x ... x h x M x dh
    k, v = ops.index(kv, 0), ops.index(kv, 1)
    attn = ops.softmax_last_axis(ops.mul(ops.matmul(q, ops.swap_last(k)), w.scale))
    out = ops.matmul(attn, v)                                     # ... x h x 1 x dh
    out = ops.reshape(ops.permute(out, (*range(nl), nl + 1, nl, nl + 2)), (*lead, 1, d))
    weights = ops.reshape(attn, (*lead, h, M))
    return w.proj(out), weights


# ---------------------------------------------------------------- MAC counts


def xca_flops(N: int, d: int, h: int) -> int:
    """Multiply-accumulates of one XCA block on N tokens.

    qkv projection 3Nd^2, cross-covariance Nd^2/h, value mixing Nd^2/h,
    output projection Nd^2.
    """
    dh = d // h
    return 3 * N * d * d + 2 * N * dh * dh * h + N * d * d


def token_attention_flops(N: int, d: int, h: int) -> int:
    return 4 * N * d * d + 2 * N * N * d


def token_attention_map_flops(N: int, d: int) -> int:
    """The N x N part only: scores plus value aggregation."""
    return 2 * N * N * d


def class_attention_flops(N: int, d: int, h: int) -> int:
    M = N + 1
    return d * d + 2 * M * d * d + 2 * M * d + d * d
