"""Token-count scaling benchmarks for XCA, token attention and a full layer.

Wall time is the median of ``reps`` runs after ``warmup`` runs. Peak bytes
come from a separate traced run: tracemalloc hooks numpy's data allocator,
so the figure is the high-water mark of every buffer the op allocates
(intermediates and output), independent of process RSS.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from ..attention import (
    TokenAttnWeights,
    XcaHeadWeights,
    token_attention_flops,
    token_attention_forward,
    xca_flops,
    xca_forward,
)
from ..layers import XcitLayer, xcit_layer_forward
from ..tensor import Tensor, no_tape

OPS = ("xca", "token_attn", "xcit_layer")
CSV_FIELDS = ("op", "N", "d", "h", "wall_ns", "peak_bytes", "macs")


@dataclass
class BenchRecord:
    op: str
    N: int
    d: int
    h: int
    wall_ns: int | None
    peak_bytes: int | None
    macs: int

    @property
    def oom(self) -> bool:
        return self.wall_ns is None


def near_square_grid(N: int) -> tuple[int, int]:
    a = int(math.isqrt(N))
    while N % a:
        a -= 1
    return a, N // a


def layer_flops(N: int, d: int, h: int) -> int:
    return xca_flops(N, d, h) + 2 * 9 * N * d + 8 * N * d * d


def _available_bytes() -> int | None:
    try:
        with open("/proc/meminfo") as f:
            for line in f:
                if line.startswith("MemAvailable:"):
                    return int(line.split()[1]) * 1024
    except OSError:
        pass
    return None


def _estimate_bytes(op: str, N: int, d: int, h: int, itemsize: int, head_chunk: int | None) -> int:
    linear = 12 * N * d * itemsize
    if op == "token_attn":
        g = h if head_chunk is None else min(h, head_chunk)
        return linear + 3 * g * N * N * itemsize
    if op == "xcit_layer":
        return linear + 8 * N * 4 * d * itemsize
    return linear


def make_op(op: str, d: int, h: int, N: int, dtype=np.float32, seed: int = 0,
            head_chunk: int | None = 2) -> tuple[Callable[[], Tensor], int]:
    """A zero-argument callable running ``op`` on fixed random input, and
    its analytic MAC count."""
    rng = np.random.default_rng(seed)
    X = Tensor(rng.standard_normal((N, d)).astype(dtype))
    if op == "xca":
        w = XcaHeadWeights(d, h, rng, dtype)
        return (lambda: xca_forward(X, w)[0]), xca_flops(N, d, h)
    if op == "token_attn":
        w = TokenAttnWeights(d, h, rng, dtype)
        return (lambda: token_attention_forward(X, w, head_chunk)), token_attention_flops(N, d, h)
    if op == "xcit_layer":
        layer = XcitLayer(d, h, rng, eps_ls=1.0, dtype=dtype)
        grid = near_square_grid(N)
        return (lambda: xcit_layer_forward(X, grid, layer, "eval")), layer_flops(N, d, h)
    raise ValueError(f"unknown op {op!r}; choose from {', '.join(OPS)}")


def measure_peak_bytes(fn: Callable[[], object]) -> int:
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        out = fn()
        peak = tracemalloc.get_traced_memory()[1] - base
        del out
    finally:
        if not was_tracing:
            tracemalloc.stop()
    return int(peak)


def measure_wall_ns(fn: Callable[[], object], reps: int = 5, warmup: int = 1) -> int:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(statistics.median(times))


def bench_scaling(op: str, d: int, h: int, N_list, reps: int = 5, warmup: int = 1,
                  dtype=np.float32, seed: int = 0, head_chunk: int | None = 2,
                  mem_budget: int | None = -1, timing: bool = True,
                  memory: bool = True) -> list[BenchRecord]:
    """One record per N. ``mem_budget=-1`` means half of MemAvailable; cells
    whose estimated footprint exceeds it, or that raise MemoryError, are
    recorded as OOM (wall_ns and peak_bytes None) and the sweep continues."""
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}; choose from {', '.join(OPS)}")
    N_list = [int(n) for n in N_list]
    if any(n < 1 for n in N_list):
        raise ValueError(f"token counts must be positive: {N_list}")
    if reps < 5 or warmup < 1:
        raise ValueError("need at least 5 timed repetitions after at least 1 warm-up")
    if mem_budget == -1:
        avail = _available_bytes()
        mem_budget = None if avail is None else avail // 2
    itemsize = np.dtype(dtype).itemsize
    records = []
    with no_tape():
        for N in N_list:
            fn, macs = make_op(op, d, h, N, dtype, seed, head_chunk)
            est = _estimate_bytes(op, N, d, h, itemsize, head_chunk)
            if mem_budget is not None and est > mem_budget:
                records.append(BenchRecord(op, N, d, h, None, None, macs))
                continue
            try:
                wall = measure_wall_ns(fn, reps, warmup) if timing else 0
                peak = measure_peak_bytes(fn) if memory else 0
            except MemoryError:
                records.append(BenchRecord(op, N, d, h, None, None, macs))
                continue
            records.append(BenchRecord(op, N, d, h, wall, peak, macs))
    return records


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log y against log x."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


def fit_slopes(records: list[BenchRecord]) -> dict[str, float | None]:
    ok = [r for r in records if not r.oom]
    out: dict[str, float | None] = {}
    for metric in ("wall_ns", "peak_bytes", "macs"):
        pts = [(r.N, getattr(r, metric)) for r in ok if getattr(r, metric)]
        out[metric] = loglog_slope(*zip(*pts)) if len(pts) >= 2 else None
    return out


def records_to_csv(records: list[BenchRecord], out=None) -> str:
    buf = io.StringIO() if out is None else out
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        row = asdict(r)
        w.writerow(["OOM" if row[k] is None else row[k] for k in CSV_FIELDS])
    return buf.getvalue() if out is None else ""
