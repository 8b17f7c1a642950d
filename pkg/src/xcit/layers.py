"""One XCiT layer (XCA -> LPI -> FFN, each pre-norm with a LayerScale
residual) and the class-attention layer that feeds the classifier."""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import GridError
from .attention import TokenAttnWeights, XcaHeadWeights, class_attention_forward, xca_forward
from .nn import LayerNorm, Linear, Module, trunc_normal
from .tensor import Param, Tensor


class LayerScale(Module):
    def __init__(self, d: int, eps: float, names=("xca", "lpi", "ffn"), dtype=np.float64):
        for n in names:
            setattr(self, f"gamma_{n}", Param(np.full(d, eps, dtype)))


class LPIWeights(Module):
    """depthwise conv -> BatchNorm -> GELU -> depthwise conv."""

    def __init__(self, d: int, rng: np.random.Generator, dtype=np.float64):
        self.conv1_w = Param(trunc_normal(rng, (d, 3, 3), 0.02, dtype))
        self.conv1_b = Param(np.zeros(d, dtype))
        self.bn_gain = Param(np.ones(d, dtype))
        self.bn_bias = Param(np.zeros(d, dtype))
        self.bn = ops.BatchNormStats.init(d, np.float64)
        self.conv2_w = Param(trunc_normal(rng, (d, 3, 3), 0.02, dtype))
        self.conv2_b = Param(np.zeros(d, dtype))


class FFNWeights(Module):
    def __init__(self, d: int, rng: np.random.Generator, hidden_ratio: int = 4, dtype=np.float64):
        self.fc1 = Linear(d, hidden_ratio * d, rng, dtype=dtype)
        self.fc2 = Linear(hidden_ratio * d, d, rng, dtype=dtype)


class XcitLayer(Module):
    def __init__(self, d: int, h: int, rng: np.random.Generator, eps_ls: float = 1.0,
                 drop_path: float = 0.0, dtype=np.float64):
        if not 0.0 <= drop_path < 1.0:
            raise ValueError(f"drop_path must be in [0, 1), got {drop_path}")
        self.norm1 = LayerNorm(d, dtype)
        self.xca = XcaHeadWeights(d, h, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.lpi = LPIWeights(d, rng, dtype)
        self.norm3 = LayerNorm(d, dtype)
        self.ffn = FFNWeights(d, rng, dtype=dtype)
        self.ls = LayerScale(d, eps_ls, dtype=dtype)
        self.drop_path = drop_path


class ClassAttentionLayer(Module):
    def __init__(self, d: int, h: int, rng: np.random.Generator, eps_ls: float = 1.0,
                 drop_path: float = 0.0, dtype=np.float64):
        self.norm1 = LayerNorm(d, dtype)
        self.attn = TokenAttnWeights(d, h, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.ffn = FFNWeights(d, rng, dtype=dtype)
        self.ls = LayerScale(d, eps_ls, names=("attn", "ffn"), dtype=dtype)
        self.drop_path = drop_path


def drop_path(x: Tensor, p: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Drop the whole residual branch per sample with probability ``p`` in
    train mode, scaling kept branches by 1/(1-p). Axes before the last two
    index samples."""
    if mode != "train" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode drop path needs an rng")
    lead = x.shape[:-2]
    keep = (np.asarray(rng.random(lead)) >= p).astype(x.dtype) / (1.0 - p)
    return ops.mul(x, Tensor(keep.reshape(lead + (1, 1)), _trusted=True))


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ops.reshape(x, (1, *x.shape)), True
    return x, False


def lpi_forward(x, grid: tuple[int, int], w: LPIWeights, mode: str = "eval") -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    Hp, Wp = grid
    N, d = x.shape[-2:]
    if N != Hp * Wp:
        raise GridError(f"LPI: {N} tokens do not fill a {Hp}x{Wp} grid")
    xb, squeeze = _batched(x)
    B = xb.shape[0]
    img = ops.reshape(ops.permute(xb, (0, 2, 1)), (B, d, Hp, Wp))
    y = ops.depthwise_conv3x3(img, w.conv1_w, w.conv1_b)
    y = ops.batch_norm_2d(y, w.bn_gain, w.bn_bias, w.bn, mode)
    y = ops.gelu(y)
    y = ops.depthwise_conv3x3(y, w.conv2_w, w.conv2_b)
    y = ops.permute(ops.reshape(y, (B, d, N)), (0, 2, 1))
    return ops.reshape(y, (N, d)) if squeeze else y


def ffn_forward(x, w: FFNWeights) -> Tensor:
    return w.fc2(ops.gelu(w.fc1(x)))


def xcit_layer_forward(x, grid: tuple[int, int], layer: XcitLayer, mode: str = "eval",
                       rng: np.random.Generator | None = None,
                       maps_out: list | None = None) -> Tensor:
    """x + dp(g_xca * XCA(LN x)), then the same for LPI and FFN.

    The XCA maps are appended to ``maps_out`` when given.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    p = layer.drop_path
    ls = layer.ls
    a, maps = xca_forward(layer.norm1(x), layer.xca)
    if maps_out is not None:
        maps_out.append(maps)
    x = ops.add(x, drop_path(ops.mul(a, ls.gamma_xca), p, mode, rng))
    b = lpi_forward(layer.norm2(x), grid, layer.lpi, mode)
    x = ops.add(x, drop_path(ops.mul(b, ls.gamma_lpi), p, mode, rng))
    c = ffn_forward(layer.norm3(x), layer.ffn)
    return ops.add(x, drop_path(ops.mul(c, ls.gamma_ffn), p, mode, rng))


def class_attention_layer_forward(cls, patches, layer: ClassAttentionLayer, mode: str = "eval",
                                  rng: np.random.Generator | None = None,
                                  weights_out: list | None = None) -> Tensor:
    """Update only the class token; the patches are attended to, not changed."""
    cls = cls if isinstance(cls, Tensor) else Tensor(cls)
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    p = layer.drop_path
    a, weights = class_attention_forward(layer.norm1(cls), layer.norm1(patches), layer.attn)
    if weights_out is not None:
        weights_out.append(weights)
    cls = ops.add(cls, drop_path(ops.mul(a, layer.ls.gamma_attn), p, mode, rng))
    f = ffn_forward(layer.norm2(cls), layer.ffn)
    return ops.add(cls, drop_path(ops.mul(f, layer.ls.gamma_ffn), p, mode, rng))
