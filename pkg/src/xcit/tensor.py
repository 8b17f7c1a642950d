"""Dense tensors, trainable parameters and the reverse-mode tape.

Ops only record onto a tape while one is active (``with Tape() as tape``);
outside a tape they are plain numpy computations, which is what the
benchmarks rely on.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "xcit_active_tape", default=None
)
_VERIFY: contextvars.ContextVar[bool] = contextvars.ContextVar("xcit_verify", default=False)


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(data: np.ndarray, where: str) -> None:
    if data.size and not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteError(f"{where}: {bad} non-finite value(s) in tensor of shape {data.shape}")


class Tensor:
    """Row-major array of real scalars.

    ``requires_grad`` is set on op outputs that depend on a Param while a
    tape is recording; leaves built from user data never require grad.
    """

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, dtype=None, *, _trusted: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not _trusted:
            _check_finite(arr, "Tensor construction")
        self.data = arr
        self.requires_grad = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype})"

    # operator sugar, kept to the handful the layers use
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


class Param(Tensor):
    """A Tensor with a gradient accumulator. Gradients add up across
    backward passes until :meth:`zero_grad` is called."""

    __slots__ = ("grad", "name")

    def __init__(self, data, dtype=None, name: str = ""):
        super().__init__(data, dtype)
        self.requires_grad = True
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of executed primitives.

    Each entry holds the output, its inputs and a vector-Jacobian closure.
    :meth:`backward` replays the closures newest-first, so every Param
    receives each of its gradient contributions exactly once.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], VJP]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: VJP) -> None:
        out.requires_grad = True
        self.entries.append((out, inputs, vjp))

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if root.size != 1:
                raise ValueError(f"backward needs a seed for non-scalar root of shape {root.shape}")
            seed = np.ones_like(root.data)
        adj: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=root.dtype)}
        if isinstance(root, Param):
            root.grad += adj[id(root)]
        for out, inputs, vjp in reversed(self.entries):
            g = adj.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                if isinstance(t, Param):
                    t.grad += gi
                else:
                    key = id(t)
                    prev = adj.get(key)
                    adj[key] = gi if prev is None else prev + gi


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


@contextlib.contextmanager
def verify_mode(enabled: bool = True) -> Iterator[None]:
    """Check every op output for NaN/Inf while active."""
    token = _VERIFY.set(enabled)
    try:
        yield
    finally:
        _VERIFY.reset(token)


def make_result(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: VJP, name: str) -> Tensor:
    """Wrap an op result, checking finiteness in verify mode and recording
    the adjoint when a tape is active and some input needs a gradient."""
    if _VERIFY.get():
        _check_finite(data, name)
    out = Tensor(data, _trusted=True)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, vjp)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype)
