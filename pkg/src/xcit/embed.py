"""Patch tokenization, 2-D sinusoidal positional codes and image I/O."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .errors import ConfigError, FormatError
from .nn import Linear, Module, trunc_normal
from .tensor import Param, Tensor

N_FREQ = 16
POS_DIM = 4 * N_FREQ  # (sin + cos) x (x, y)
POS_BASE = 10000.0


@dataclass(frozen=True)
class PatchGrid:
    H_p: int
    W_p: int
    patch_size: int = 16

    @property
    def N(self) -> int:
        return self.H_p * self.W_p

    @property
    def shape(self) -> tuple[int, int]:
        return self.H_p, self.W_p

    @classmethod
    def for_image(cls, H: int, W: int, patch_size: int) -> "PatchGrid":
        if H % patch_size or W % patch_size:
            raise ConfigError(f"image {H}x{W} is not divisible by patch size {patch_size}")
        return cls(H // patch_size, W // patch_size, patch_size)


def stem_channels(d: int, patch_size: int) -> list[int]:
    """Channel ramp of the stride-2 conv stem, ending at ``d``.

    16 -> [3, d/8, d/4, d/2, d]; 8 -> [3, d/4, d/2, d].
    """
    n = int(round(math.log2(patch_size)))
    if patch_size < 2 or 2 ** n != patch_size:
        raise ConfigError(f"conv patch embedding needs a power-of-two patch size, got {patch_size}")
    if d % 2 ** (n - 1):
        raise ConfigError(f"width {d} is not divisible by {2 ** (n - 1)} for patch size {patch_size}")
    return [3] + [d // 2 ** (n - 1 - i) for i in range(n)]


class ConvPatchEmbed(Module):
    def __init__(self, d: int, patch_size: int, rng: np.random.Generator, dtype=np.float64):
        self.patch_size = patch_size
        ch = stem_channels(d, patch_size)
        self.convs = [_Conv(ci, co, rng, dtype) for ci, co in zip(ch[:-1], ch[1:])]


class _Conv(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype):
        self.weight = Param(trunc_normal(rng, (c_out, c_in, 3, 3), 0.02, dtype))
        self.bias = Param(np.zeros(c_out, dtype))


class LinearPatchEmbed(Module):
    def __init__(self, d: int, patch_size: int, rng: np.random.Generator, dtype=np.float64):
        self.patch_size = patch_size
        self.proj = Linear(3 * patch_size * patch_size, d, rng, dtype=dtype)


def _check_image(img: Tensor, patch_size: int) -> PatchGrid:
    if img.ndim != 4:
        raise ConfigError(f"expected a B x C x H x W image, got shape {img.shape}")
    return PatchGrid.for_image(img.shape[2], img.shape[3], patch_size)


def conv_patch_embed(img, embed: ConvPatchEmbed) -> tuple[Tensor, PatchGrid]:
    """Stride-2 3x3 convs with GELU between; returns B x N x d tokens."""
    img = img if isinstance(img, Tensor) else Tensor(img)
    grid = _check_image(img, embed.patch_size)
    x = img
    for i, conv in enumerate(embed.convs):
        if i:
            x = ops.gelu(x)
        x = ops.conv2d(x, conv.weight, conv.bias, stride=2, padding=1)
    B, d = x.shape[:2]
    tokens = ops.permute(ops.reshape(x, (B, d, grid.N)), (0, 2, 1))
    return tokens, grid


def linear_patch_embed(img, embed: LinearPatchEmbed) -> tuple[Tensor, PatchGrid]:
    """Flatten each non-overlapping patch (channel-major) and project to d."""
    img = img if isinstance(img, Tensor) else Tensor(img)
    grid = _check_image(img, embed.patch_size)
    B, C = img.shape[:2]
    p = embed.patch_size
    x = ops.reshape(img, (B, C, grid.H_p, p, grid.W_p, p))
    x = ops.permute(x, (0, 2, 4, 1, 3, 5))
    x = ops.reshape(x, (B, grid.N, C * p * p))
    return embed.proj(x), grid


def sinusoid_codes(H_p: int, W_p: int) -> np.ndarray:
    """N x 64 raw codes, tokens in row-major grid order.

    Patch centres are normalized to (0, 2*pi) per axis; each axis gets 16 sines
    then 16 cosines over the ladder 10000^(2k/32); x (column) comes first.
    """
    freqs = POS_BASE ** (2.0 * np.arange(N_FREQ) / (2 * N_FREQ))
    ys = (np.arange(H_p) + 0.5) / H_p * 2.0 * math.pi
    xs = (np.arange(W_p) + 0.5) / W_p * 2.0 * math.pi

    def enc(t):
        a = t[:, None] / freqs
        return np.concatenate([np.sin(a), np.cos(a)], axis=1)

    ex, ey = enc(xs), enc(ys)
    codes = np.concatenate(
        [np.broadcast_to(ex[None, :, :], (H_p, W_p, 2 * N_FREQ)),
         np.broadcast_to(ey[:, None, :], (H_p, W_p, 2 * N_FREQ))],
        axis=2,
    )
    return codes.reshape(H_p * W_p, POS_DIM)


class PosEncoder(Module):
    def __init__(self, d: int, rng: np.random.Generator, dtype=np.float64):
        self.proj = Linear(POS_DIM, d, rng, dtype=dtype)


def positional_encoding(grid: PatchGrid, enc: PosEncoder) -> Tensor:
    codes = Tensor(sinusoid_codes(grid.H_p, grid.W_p).astype(enc.proj.weight.dtype))
    return enc.proj(codes)


# ---------------------------------------------------------------- raw image files

MAGIC = b"XIMG"
_HEADER = struct.Struct("<4sIIIII")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def write_raw_image(path, img: np.ndarray) -> None:
    """Write a B x C x H x W array: 24-byte header then row-major payload."""
    img = np.asarray(img)
    if img.ndim != 4:
        raise FormatError(f"raw image must be 4-D (B, C, H, W), got shape {img.shape}")
    dt = img.dtype.newbyteorder("<") if img.dtype.kind == "f" else img.dtype
    if dt not in _CODES:
        raise FormatError(f"unsupported dtype {img.dtype}; use float32, float64 or uint8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, _CODES[dt], *img.shape))
        f.write(np.ascontiguousarray(img, dtype=dt).tobytes())


def read_raw_image(path) -> np.ndarray:
    """Read a raw image file as float64; uint8 payloads are scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"header: file has {len(buf)} bytes, need {_HEADER.size}")
    magic, code, *dims = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"magic: expected {MAGIC!r}, got {magic!r}")
    if code not in _DTYPES:
        raise FormatError(f"dtype: unknown code {code}; valid codes {sorted(_DTYPES)}")
    for name, n in zip("BCHW", dims):
        if n == 0:
            raise FormatError(f"{name}: extent must be positive")
    dt = _DTYPES[code]
    expect = int(np.prod(dims)) * dt.itemsize
    payload = buf[_HEADER.size:]
    if len(payload) != expect:
        raise FormatError(f"payload: expected {expect} bytes for shape {tuple(dims)}, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dt).reshape(dims).astype(np.float64)
    if code == 3:
        arr /= 255.0
    return arr


def synthetic_image(B: int, H: int, W: int, seed: int = 0) -> np.ndarray:
    """Smooth random colour fields with a few blobs; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    out = np.empty((B, 3, H, W))
    for b in range(B):
        for c in range(3):
            fy, fx = rng.uniform(1, 4, size=2)
            ph = rng.uniform(0, 2 * math.pi, size=2)
            field = 0.5 * np.sin(2 * math.pi * fy * yy + ph[0]) * np.cos(2 * math.pi * fx * xx + ph[1])
            for _ in range(3):
                cy, cx = rng.uniform(0.1, 0.9, size=2)
                r = rng.uniform(0.05, 0.2)
                field += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
            out[b, c] = field
    return out
