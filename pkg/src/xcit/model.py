"""Full XCiT: patch embedding, XCiT layers, class-attention stage, classifier.

Also holds the reference presets and the analytic parameter / MAC counters.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .attention import class_attention_flops, xca_flops
from .embed import (
    POS_DIM,
    ConvPatchEmbed,
    LinearPatchEmbed,
    PatchGrid,
    PosEncoder,
    conv_patch_embed,
    linear_patch_embed,
    positional_encoding,
    stem_channels,
)
from .errors import ConfigError, FormatError
from .layers import (
    ClassAttentionLayer,
    XcitLayer,
    class_attention_layer_forward,
    xcit_layer_forward,
)
from .nn import LayerNorm, Linear, Module, trunc_normal
from .tensor import Param, Tensor


@dataclass(frozen=True)
class XcitConfig:
    depth: int
    d: int
    h: int
    patch_size: int = 16
    n_classes: int = 1000
    eps_ls: float = 1.0
    d_r: float = 0.0
    n_cls_layers: int = 2
    embed: str = "conv"

    def __post_init__(self):
        for name in ("depth", "d", "h", "patch_size", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_cls_layers < 0:
            raise ConfigError(f"n_cls_layers must be >= 0, got {self.n_cls_layers}")
        if self.d % self.h:
            raise ConfigError(f"d={self.d} is not divisible by h={self.h}")
        if not 0.0 <= self.d_r < 1.0:
            raise ConfigError(f"d_r must be in [0, 1), got {self.d_r}")
        if self.embed not in ("conv", "linear"):
            raise ConfigError(f"embed must be 'conv' or 'linear', got {self.embed!r}")
        if self.embed == "conv":
            stem_channels(self.d, self.patch_size)

    def replace(self, **kw) -> "XcitConfig":
        return dataclasses.replace(self, **kw)


# depth, d, heads, d_r, LayerScale eps
_PRESETS = {
    "N12": (12, 128, 4, 0.0, 1.0),
    "T12": (12, 192, 4, 0.0, 1.0),
    "T24": (24, 192, 4, 0.05, 1e-5),
    "S12": (12, 384, 8, 0.05, 1.0),
    "S24": (24, 384, 8, 0.1, 1e-5),
    "M24": (24, 512, 8, 0.15, 1e-5),
    "L24": (24, 768, 16, 0.25, 1e-5),
}
PRESET_NAMES = tuple(_PRESETS)

# params, GMACs @224/16, GMACs @384/8
REFERENCE_SIZES = {
    "N12": (3e6, 0.5, 6.4),
    "T12": (7e6, 1.2, 14.3),
    "T24": (12e6, 2.3, 27.3),
    "S12": (26e6, 4.8, 55.6),
    "S24": (48e6, 9.1, 106.0),
    "M24": (84e6, 16.2, 188.0),
    "L24": (189e6, 36.1, 417.9),
}
PARAM_TOL = 0.10
FLOP_TOL = 0.15


def preset(name: str, patch_size: int = 16, **overrides) -> XcitConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}")
    depth, d, h, d_r, eps = _PRESETS[name]
    if name == "L24" and patch_size == 8:
        d_r = 0.3
    cfg = XcitConfig(depth=depth, d=d, h=h, patch_size=patch_size, eps_ls=eps, d_r=d_r)
    return cfg.replace(**overrides) if overrides else cfg


class XcitModel(Module):
    def __init__(self, cfg: XcitConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        d = cfg.d
        if cfg.embed == "conv":
            self.embed = ConvPatchEmbed(d, cfg.patch_size, rng, dtype)
        else:
            self.embed = LinearPatchEmbed(d, cfg.patch_size, rng, dtype)
        self.pos = PosEncoder(d, rng, dtype)
        self.layers = [XcitLayer(d, cfg.h, rng, cfg.eps_ls, cfg.d_r, dtype) for _ in range(cfg.depth)]
        self.cls_token = Param(trunc_normal(rng, (1, d), 0.02, dtype))
        self.cls_layers = [ClassAttentionLayer(d, cfg.h, rng, cfg.eps_ls, cfg.d_r, dtype)
                           for _ in range(cfg.n_cls_layers)]
        self.norm = LayerNorm(d, dtype)
        self.head = Linear(d, cfg.n_classes, rng, dtype=dtype)
        for name, p in self.named_params():
            p.name = name

    @property
    def dtype(self):
        return self.cls_token.dtype


def build(cfg: XcitConfig, seed: int | np.random.Generator = 0, dtype=np.float64) -> XcitModel:
    """Initialize every weight (truncated normal, std 0.02; norms at 1/0);
    deterministic in ``seed``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return XcitModel(cfg, rng, dtype)


def forward(model: XcitModel, img, mode: str = "eval", rng: np.random.Generator | None = None,
            collect: dict | None = None) -> Tensor:
    """B x 3 x H x W images -> B x n_classes logits.

    ``collect`` (optional) receives the patch grid, the per-layer XCA maps
    and the per-class-layer attention weights.
    """
    img = img if isinstance(img, Tensor) else Tensor(np.asarray(img, dtype=model.dtype))
    if img.dtype != model.dtype:
        img = Tensor(img.data.astype(model.dtype))
    if model.cfg.embed == "conv":
        x, grid = conv_patch_embed(img, model.embed)
    else:
        x, grid = linear_patch_embed(img, model.embed)
    x = ops.add(x, positional_encoding(grid, model.pos))
    maps = [] if collect is not None else None
    for layer in model.layers:
        x = xcit_layer_forward(x, grid.shape, layer, mode, rng, maps)
    B, d = x.shape[0], x.shape[-1]
    cls = ops.add(Tensor(np.zeros((B, 1, d), model.dtype), _trusted=True), model.cls_token)
    weights = [] if collect is not None else None
    for layer in model.cls_layers:
        cls = class_attention_layer_forward(cls, x, layer, mode, rng, weights)
    out = model.norm(ops.reshape(cls, (B, d)))
    if collect is not None:
        collect.update(grid=grid, xca_maps=maps, cls_weights=weights)
    return model.head(out)


# ---------------------------------------------------------------- accounting


def count_params(model: Module) -> int:
    return sum(p.size for p in model.params())


def param_count(cfg: XcitConfig) -> int:
    """Closed-form parameter count; equals count_params(build(cfg))."""
    d, h = cfg.d, cfg.h
    if cfg.embed == "conv":
        ch = stem_channels(d, cfg.patch_size)
        embed = sum(ci * co * 9 + co for ci, co in zip(ch[:-1], ch[1:]))
    else:
        embed = 3 * cfg.patch_size ** 2 * d + d
    pos = POS_DIM * d + d
    ffn = (d * 4 * d + 4 * d) + (4 * d * d + d)
    attn = (3 * d * d + 3 * d) + (d * d + d)
    layer = 3 * 2 * d + attn + h + (2 * (9 * d + d) + 2 * d) + ffn + 3 * d
    cls_layer = 2 * 2 * d + attn + ffn + 2 * d
    return (embed + pos + cfg.depth * layer + d + cfg.n_cls_layers * cls_layer
            + 2 * d + d * cfg.n_classes + cfg.n_classes)


def flops_breakdown(cfg: XcitConfig, H: int, W: int) -> dict[str, int]:
    """MACs per component for one H x W image; one multiply-accumulate = 1."""
    grid = PatchGrid.for_image(H, W, cfg.patch_size)
    N, d, h = grid.N, cfg.d, cfg.h
    if cfg.embed == "conv":
        ch = stem_channels(d, cfg.patch_size)
        embed, hh, ww = 0, H, W
        for ci, co in zip(ch[:-1], ch[1:]):
            hh, ww = (hh + 1) // 2, (ww + 1) // 2
            embed += hh * ww * co * ci * 9
    else:
        embed = N * 3 * cfg.patch_size ** 2 * d
    return {
        "embed": embed,
        "pos": N * POS_DIM * d,
        "xca": cfg.depth * xca_flops(N, d, h),
        "lpi": cfg.depth * 2 * 9 * N * d,
        "ffn": cfg.depth * 8 * N * d * d,
        "cls": cfg.n_cls_layers * (class_attention_flops(N, d, h) + 8 * d * d),
        "head": d * cfg.n_classes,
    }


def count_flops(cfg: XcitConfig, H: int, W: int | None = None) -> int:
    return sum(flops_breakdown(cfg, H, H if W is None else W).values())


def reference_check(name: str, res: int, patch: int) -> dict:
    """Compare a preset against its reference sizes; ``macs_ref`` is None when
    no reference MAC count exists for (res, patch)."""
    cfg = preset(name, patch)
    params = param_count(cfg)
    macs = count_flops(cfg, res, res)
    ref_p, g224, g384 = REFERENCE_SIZES[name]
    ref_m = {(224, 16): g224, (384, 8): g384}.get((res, patch))
    ref_m = None if ref_m is None else ref_m * 1e9
    p_ok = abs(params - ref_p) <= PARAM_TOL * ref_p
    m_ok = ref_m is None or abs(macs - ref_m) <= FLOP_TOL * ref_m
    return {"params": params, "params_ref": ref_p, "params_tol": PARAM_TOL,
            "params_rel_err": params / ref_p - 1, "params_ok": p_ok,
            "macs": macs, "macs_ref": ref_m, "macs_tol": FLOP_TOL,
            "macs_rel_err": None if ref_m is None else macs / ref_m - 1, "macs_ok": m_ok,
            "ok": p_ok and m_ok}


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"XCKP"
CKPT_VERSION = 1


def state_dict(model: Module) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in model.named_params()}
    out.update(model.named_buffers())
    return out


def save_checkpoint(model: Module, path) -> None:
    """Header (magic, version, record count) then per record: name length,
    utf-8 name, ndim, dims, float32 little-endian payload. All ints u32 LE."""
    records = state_dict(model)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(records)))
        for name, arr in records.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)) + raw)
            f.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise FormatError("header: checkpoint shorter than 12 bytes")
    magic, version, n = struct.unpack_from("<4sII", buf)
    if magic != CKPT_MAGIC:
        raise FormatError(f"magic: expected {CKPT_MAGIC!r}, got {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"version: unsupported checkpoint version {version}")
    off, out = 12, {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", buf, off)
            name = buf[off + 4:off + 4 + ln].decode("utf-8")
            off += 4 + ln
            (nd,) = struct.unpack_from("<I", buf, off)
            dims = struct.unpack_from(f"<{nd}I", buf, off + 4)
            off += 4 + 4 * nd
            count = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims)
            off += 4 * count
            out[name] = arr
    except (struct.error, ValueError) as e:
        raise FormatError(f"payload: truncated or corrupt record ({e})") from None
    return out


def load_checkpoint(model: Module, path) -> None:
    records = read_checkpoint(path)
    targets = {name: p.data for name, p in model.named_params()}
    targets.update(model.named_buffers())
    missing = sorted(set(targets) - set(records))
    if missing:
        raise FormatError(f"checkpoint is missing {len(missing)} entries, e.g. {missing[0]}")
    for name, dst in targets.items():
        src = records[name]
        if src.shape != dst.shape:
            raise FormatError(f"{name}: shape {src.shape} in checkpoint, model expects {dst.shape}")
        dst[...] = src
