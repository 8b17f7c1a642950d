"""AdamW with decoupled weight decay, and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class AdamWState:
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamWState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float | Sequence[float] = 0.0) -> AdamWState:
    """Update ``params`` in place.

    The decay term shrinks each weight by ``lr * weight_decay`` directly and
    never enters the moment estimates.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"state tracks {len(state.m)} params, got {len(params)}")
    wds = [weight_decay] * len(params) if np.isscalar(weight_decay) else list(weight_decay)
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v, wd in zip(params, grads, state.m, state.v, wds):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if wd:
            p *= 1.0 - lr * wd
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def cosine_lr(step: int, total: int, base_lr: float, min_lr: float = 0.0) -> float:
    if total <= 0:
        return base_lr
    frac = min(max(step / total, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))
