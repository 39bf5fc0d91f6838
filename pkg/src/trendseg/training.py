"""Seeded mini-batch training with BCE, Adam and validation early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import SampleSet
from .models import Checkpoint, Module, forward

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    patience: int = 20
    seed: int = 0
    shuffle: bool = True
    checkpoint_path: Optional[str] = None

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        return self


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_loss)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch] if self.best_epoch >= 0 else math.inf

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for i, row in enumerate(zip(self.train_loss, self.val_loss, self.val_acc), start=1):
                w.writerow([i, *(f"{v:.8g}" for v in row)])


def _targets(samples: SampleSet) -> np.ndarray:
    return samples.targets[:, None]


def predict(model: Module, samples: SampleSet, batch_size: int = 64) -> np.ndarray:
    """Probabilities ``[S, T_out, 4]`` without recording gradients."""
    if len(samples) == 0:
        raise ValueError("no samples to predict")
    out = []
    with T.no_grad():
        for s in range(0, len(samples), batch_size):
            out.append(forward(model, samples.inputs[s: s + batch_size]).data[:, 0])
    return np.concatenate(out, axis=0)


def evaluate_loss(model: Module, samples: SampleSet, batch_size: int = 64) -> float:
    """Mean per-pixel BCE over ``samples``."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate loss on an empty sample list")
    total, count = 0.0, 0
    with T.no_grad():
        for s in range(0, len(samples), batch_size):
            pred = forward(model, samples.inputs[s: s + batch_size])
            y = _targets(samples)[s: s + batch_size]
            total += float(T.bce_loss(pred, y).data) * y.size
            count += y.size
    return total / count


def pixel_accuracy(model: Module, samples: SampleSet) -> float:
    pred = predict(model, samples)
    return float(((pred >= 0.5) == (samples.targets >= 0.5)).mean())


def check_compatible(model: Module, samples: SampleSet) -> None:
    cfg = model.config
    got = (samples.N, samples.T_in, samples.T_out)
    want = (cfg.N, cfg.T_in, cfg.T_out)
    if got != want:
        raise ValueError(f"model expects (N, T_in, T_out)={want}, data has {got}")


def train(model: Module, train_set: SampleSet, val_set: SampleSet,
          config: TrainConfig) -> tuple[Checkpoint, TrainHistory]:
    """Fit ``model`` and return the lowest-validation-loss checkpoint.

    The model is left holding the best weights on return.
    """
    config.validate()
    check_compatible(model, train_set)
    check_compatible(model, val_set)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")

    params = model.parameters()
    opt = T.Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best: Optional[Checkpoint] = None
    stale = 0
    y_all = _targets(train_set)

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_set)) if config.shuffle else np.arange(len(train_set))
        running, seen = 0.0, 0
        for s in range(0, len(order), config.batch_size):
            idx = order[s: s + config.batch_size]
            with T.Tape() as tape:
                loss = T.bce_loss(forward(model, train_set.inputs[idx]), y_all[idx])
            T.backward(tape, loss)
            opt.step()
            running += float(loss.data) * len(idx)
            seen += len(idx)

        val_loss = evaluate_loss(model, val_set)
        history.train_loss.append(running / seen)
        history.val_loss.append(val_loss)
        history.val_acc.append(pixel_accuracy(model, val_set))
        logger.debug("epoch %d train %.5f val %.5f", epoch + 1, history.train_loss[-1], val_loss)

        if best is None or val_loss < history.best_val_loss:
            history.best_epoch = epoch
            best = Checkpoint.from_model(model, epoch=epoch + 1, val_loss=val_loss)
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break

    best.load_into(model)
    if config.checkpoint_path:
        best.save(config.checkpoint_path)
    return best, history
