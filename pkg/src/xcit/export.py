"""CSV and 8-bit PGM writers for attention maps."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .embed import PatchGrid


def maps_to_csv(maps: np.ndarray, out=None) -> str:
    """Row-major ``head,row,col,value`` for an h x rows x cols stack."""
    maps = np.asarray(maps)
    if maps.ndim != 3:
        raise ValueError(f"expected h x rows x cols, got shape {maps.shape}")
    buf = io.StringIO() if out is None else out
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("head", "row", "col", "value"))
    for hd, r, c in np.ndindex(*maps.shape):
        w.writerow((hd, r, c, repr(float(maps[hd, r, c]))))
    return buf.getvalue() if out is None else ""


def to_pgm(arr: np.ndarray) -> bytes:
    """Binary PGM (P5), values min-max rescaled to 0..255; a constant image
    maps to all zeros."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {arr.shape}")
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo) * 255.0
    pix = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    rows, cols = arr.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pix.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError("not a binary PGM")
    cols, rows = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


def class_attention_grid(weights: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """h x (N+1) class-attention weights -> h x H_p x W_p patch maps (the
    class token's own share, column 0, is dropped)."""
    weights = np.asarray(weights)
    h, M = weights.shape
    if M != grid.N + 1:
        raise ValueError(f"{M} weights per head do not match a grid of {grid.N} patches + cls")
    return weights[:, 1:].reshape(h, grid.H_p, grid.W_p)


def write_pgm_stack(maps: np.ndarray, out_dir, stem: str = "head") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, m in enumerate(maps):
        p = out_dir / f"{stem}{k}.pgm"
        p.write_bytes(to_pgm(m))
        paths.append(p)
    return paths
