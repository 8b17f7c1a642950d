"""Central-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Param, Tape, Tensor, no_tape


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    n_checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _scalar(out: Tensor) -> float:
    v = float(np.asarray(out.data).reshape(-1)[0]) if out.size == 1 else None
    if v is None:
        raise ValueError(f"gradcheck needs a scalar function, got shape {out.shape}")
    if not np.isfinite(v):
        raise NonFiniteError(f"gradcheck: f evaluated to {v}")
    return v


def gradcheck(
    f: Callable[[], Tensor],
    params: Sequence[Param],
    h: float = 1e-5,
    floor: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckResult:
    """Compare tape gradients of scalar ``f()`` against central differences.

    Relative error per coordinate is ``|analytic - numeric| / max(|analytic|,
    |numeric|, floor)``; the floor keeps coordinates whose true gradient is
    ~0 from dividing round-off by round-off. With ``max_coords`` set, that
    many coordinates per Param are sampled (all of them when smaller).
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"gradcheck requires float64 params, {p.name or p.shape} is {p.dtype}")
        p.zero_grad()
    with Tape() as tape:
        out = f()
    _scalar(out)
    tape.backward(out)
    analytic = [p.grad.copy() for p in params]

    worst = (0.0, "", (), )
    n = 0
    with no_tape():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = _scalar(f())
                flat[i] = orig - h
                fm = _scalar(f())
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                a = ga.reshape(-1)[i]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                n += 1
                if err > worst[0]:
                    worst = (err, p.name, np.unravel_index(i, p.shape))
    for p in params:
        p.zero_grad()
    return GradcheckResult(float(worst[0]), worst[1], tuple(int(j) for j in worst[2]), n)


def random_projection_loss(out: Tensor, seed: int = 0):
    """Fixed random linear functional of ``out``: a generic scalar loss whose
    gradient exercises every output entry."""
    from . import ops

    r = np.random.default_rng(seed).standard_normal(out.shape)
    return ops.sum_all(ops.mul(out, Tensor(r)))
