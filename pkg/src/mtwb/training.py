"""Mini-batch Adam training loop shared by the pipelines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .optim import Adam
from .tensor import Tape, grad_of

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    patience: int = 10
    seed: int = 0


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = math.inf

    @property
    def train_losses(self):
        return [h["train_loss"] for h in self.history]

    @property
    def val_metrics(self):
        return [h["val_metric"] for h in self.history]


def batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(1, epoch, batch)))


def fit(params: dict, loss_fn, n_train: int, evaluate, hyper: TrainConfig,
        post_step=None, maximize=False) -> TrainResult:
    """Train ``params`` in place and leave them at the best validation epoch.

    ``loss_fn(indices, rng)`` records a scalar loss for one mini-batch on the
    active tape.  ``evaluate()`` returns the validation metric after each
    epoch (lower is better unless ``maximize``).  ``post_step()`` runs after
    every optimizer update, e.g. to project parameters back onto a
    constraint set.
    """
    names = list(params)
    tensors = [params[n] for n in names]
    opt = Adam(tensors, lr=hyper.lr)
    result = TrainResult()
    sign = -1.0 if maximize else 1.0
    best = [t.data for t in tensors]
    stale = 0
    for epoch in range(hyper.epochs):
        order = np.random.default_rng(np.random.SeedSequence(hyper.seed, spawn_key=(0, epoch))).permutation(n_train)
        losses = []
        for b, start in enumerate(range(0, n_train, hyper.batch_size)):
            idx = order[start:start + hyper.batch_size]
            with Tape() as tape:
                loss = loss_fn(idx, batch_rng(hyper.seed, epoch, b))
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"training diverged: loss {value} at epoch {epoch}, batch {b}")
            opt.step(grad_of(tape, loss, tensors))
            if post_step is not None:
                post_step()
            losses.append(value)
        metric = float(evaluate())
        result.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_metric": metric})
        log.info("epoch %d loss %.6g val %.6g", epoch, np.mean(losses), metric)
        if sign * metric < sign * result.best_metric or result.best_epoch < 0:
            result.best_metric, result.best_epoch = metric, epoch
            best = [t.data for t in tensors]
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    for t, value in zip(tensors, best):
        t.assign(value)
    return result


def moving_average(values, window=5):
    values = np.asarray(values, dtype=np.float64)
    if values.size < window:
        return values.copy()
    return np.convolve(values, np.ones(window) / window, mode="valid")
