"""Synthetic grating classification task and the toy training loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .. import ops
from ..model import XcitConfig, XcitModel, build, count_params, forward
from ..tensor import Tape, no_tape
from .optim import AdamWState, adamw_step, cosine_lr

# integer (cycles along y, cycles along x) per class; orthogonal on any even grid
CLASS_FREQS = ((0, 2), (2, 0), (2, 2), (2, -2), (0, 4), (4, 0), (4, 4), (4, -4), (0, 6), (6, 0))


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class ToyTask:
    """Each class is a sinusoidal grating with its own spatial frequency,
    random phase and per-channel contrast, buried in Gaussian noise."""

    n_classes: int = 2
    size: int = 32
    n_train: int = 512
    n_holdout: int = 256
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_classes <= len(CLASS_FREQS):
            raise ValueError(f"n_classes must be in [2, {len(CLASS_FREQS)}], got {self.n_classes}")

    def _sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        S = self.size
        yy, xx = np.meshgrid(np.arange(S) / S, np.arange(S) / S, indexing="ij")
        labels = rng.integers(0, self.n_classes, size=n)
        phase = rng.uniform(0, 2 * math.pi, size=n)
        contrast = rng.uniform(0.5, 1.0, size=(n, 3))
        imgs = self.noise * rng.standard_normal((n, 3, S, S))
        for i, c in enumerate(labels):
            fy, fx = CLASS_FREQS[c]
            wave = np.cos(2 * math.pi * (fy * yy + fx * xx) + phase[i])
            imgs[i] += contrast[i, :, None, None] * wave
        return imgs, labels

    def generate(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        Xtr, ytr = self._sample(self.n_train, rng)
        Xho, yho = self._sample(self.n_holdout, rng)
        return Xtr, ytr, Xho, yho

    def oracle_features(self, imgs: np.ndarray) -> np.ndarray:
        """Channel-summed Fourier power at each class frequency."""
        S = self.size
        yy, xx = np.meshgrid(np.arange(S) / S, np.arange(S) / S, indexing="ij")
        feats = []
        for fy, fx in CLASS_FREQS[: self.n_classes]:
            basis = np.exp(-2j * math.pi * (fy * yy + fx * xx))
            coef = np.einsum("nchw,hw->nc", imgs, basis)
            feats.append((np.abs(coef) ** 2).sum(axis=1))
        return np.stack(feats, axis=1)


def toy_config(n_classes: int = 2, **kw) -> XcitConfig:
    base = dict(depth=2, d=32, h=4, patch_size=8, n_classes=n_classes, eps_ls=1.0, d_r=0.0,
                n_cls_layers=2)
    base.update(kw)
    return XcitConfig(**base)


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    min_lr: float = 1e-6
    batch_size: int = 32
    zero_head: bool = True


@dataclass
class EpochStats:
    epoch: int
    loss: float
    holdout_acc: float


def evaluate(model: XcitModel, X: np.ndarray, y: np.ndarray, batch: int = 128) -> tuple[float, float]:
    """Mean loss and accuracy in eval mode."""
    losses, correct = 0.0, 0
    with no_tape():
        for i in range(0, len(X), batch):
            logits = forward(model, X[i:i + batch], "eval")
            losses += float(ops.cross_entropy(logits, y[i:i + batch]).data) * len(logits.data)
            correct += int((logits.data.argmax(axis=1) == y[i:i + batch]).sum())
    return losses / len(X), correct / len(X)


def _decays(model: XcitModel, wd: float) -> list[float]:
    return [wd if p.ndim >= 2 and name != "cls_token" else 0.0 for name, p in model.named_params()]


def train_toy(cfg: XcitConfig | None = None, task: ToyTask | None = None, epochs: int = 30,
              hyper: TrainHyper | None = None, seed: int = 0, ablate_xca: bool = False,
              model: XcitModel | None = None) -> list[EpochStats]:
    """Train with AdamW and per-step cosine decay.

    Row 0 is the eval-mode training loss and holdout accuracy at
    initialization; row e >= 1 holds the mean minibatch loss of epoch e and
    the holdout accuracy after it. ``ablate_xca`` zeroes and freezes every
    XCA LayerScale gain.
    """
    task = task or ToyTask()
    cfg = cfg or toy_config(task.n_classes)
    hyper = hyper or TrainHyper()
    if cfg.n_classes != task.n_classes:
        raise ValueError(f"config has {cfg.n_classes} classes, task has {task.n_classes}")
    model = model or build(cfg, seed)
    if count_params(model) > 200_000:
        raise ValueError(f"toy training is limited to 200k params, config has {count_params(model)}")
    if hyper.zero_head:
        model.head.weight.data[...] = 0.0
        model.head.bias.data[...] = 0.0
    frozen = set()
    if ablate_xca:
        for layer in model.layers:
            layer.ls.gamma_xca.data[...] = 0.0
            frozen.add(id(layer.ls.gamma_xca))
    named = [(n, p) for n, p in model.named_params() if id(p) not in frozen]
    params = [p for _, p in named]
    decays = [d for (n, p), d in zip(model.named_params(), _decays(model, hyper.weight_decay))
              if id(p) not in frozen]

    Xtr, ytr, Xho, yho = task.generate()
    rng = np.random.default_rng(seed + 1)
    steps_per_epoch = math.ceil(len(Xtr) / hyper.batch_size)
    total = epochs * steps_per_epoch
    state = AdamWState()
    history = [EpochStats(0, *evaluate(model, Xtr, ytr)[:1], evaluate(model, Xho, yho)[1])]
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(Xtr))
        losses = []
        for i in range(0, len(order), hyper.batch_size):
            idx = order[i:i + hyper.batch_size]
            with Tape() as tape:
                loss = ops.cross_entropy(forward(model, Xtr[idx], "train", rng), ytr[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, step {step}")
            for p in params:
                p.zero_grad()
            tape.backward(loss)
            lr = cosine_lr(step, total, hyper.lr, hyper.min_lr)
            adamw_step([p.data for p in params], [p.grad for p in params], state, lr,
                       hyper.beta1, hyper.beta2, hyper.eps, decays)
            losses.append(value)
            step += 1
        history.append(EpochStats(epoch, float(np.mean(losses)), evaluate(model, Xho, yho)[1]))
    return history


def history_to_csv(history: list[EpochStats], out=None) -> str:
    buf = io.StringIO() if out is None else out
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "loss", "holdout_acc"))
    for r in history:
        w.writerow((r.epoch, repr(r.loss), repr(r.holdout_acc)))
    return buf.getvalue() if out is None else ""
