"""Parameter containers shared by the attention, layer and model code."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Param, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape, dtype=np.float64 if dtype == np.float64 else np.float32)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()), dtype=out.dtype)
        bad = np.abs(out) > 2.0
    out *= std
    return out.astype(dtype, copy=False)


class Module:
    """Attribute-ordered tree of Params, sub-Modules and lists of Modules.

    Buffers (non-trainable arrays such as BatchNorm running statistics) are
    exposed through :meth:`named_buffers` so checkpoints can carry them.
    """

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_params(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_params(f"{prefix}{self._list_prefix(key)}{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, ops.BatchNormStats):
                yield name + ".running_mean", val.mean
                yield name + ".running_var", val.var
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_buffers(f"{prefix}{self._list_prefix(key)}{i}.")

    @staticmethod
    def _list_prefix(key: str) -> str:
        # "layers" -> "layer", so names read layer{i}.{block}.{param}
        return key[:-1] if key.endswith("s") else key

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()


class Linear(Module):
    """y = x W + b with W stored in x out."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float64, std: float = 0.02):
        self.weight = Param(trunc_normal(rng, (d_in, d_out), std, dtype))
        if bias:
            self.bias = Param(np.zeros(d_out, dtype))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64):
        self.gain = Param(np.ones(d, dtype))
        self.bias = Param(np.zeros(d, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias)
