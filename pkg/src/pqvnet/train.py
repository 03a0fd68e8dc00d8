"""Mini-batch training with Adam, early stopping, and best-epoch selection.

Each epoch reshuffles the training split with a seed derived from
(config.seed, epoch), so runs are reproducible and a run resumed at an epoch
boundary replays exactly the batches an uninterrupted run would have seen.
Early stopping watches validation loss; the returned best parameters are the
ones from the highest-validation-accuracy epoch (earliest on ties).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import LabeledDataset, batch_iter
from .nn import LossConfig, LossError, ModelParams, adam_step, forward, loss, loss_and_gradients, predict

__all__ = [
    "EpochStats",
    "TrainConfig",
    "TrainHistory",
    "TrainResult",
    "TrainingDiverged",
    "train",
]


class TrainingDiverged(Exception):
    """Loss went non-finite; training aborted."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 30
    learning_rate: float = 0.001
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    def to_csv(self, path: str | Path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for row in self.epochs:
                writer.writerow([row.epoch, f"{row.train_loss:.9g}", f"{row.val_loss:.9g}", f"{row.val_acc:.9g}"])


@dataclass
class TrainResult:
    best_params: ModelParams
    final_params: ModelParams
    history: TrainHistory


def _evaluate_split(params: ModelParams, dataset: LabeledDataset, split: str, config: TrainConfig):
    """Loss (metric terms over the whole split) and accuracy, dropout off."""
    probs_parts, label_parts = [], []
    for batch in batch_iter(dataset, split, config.batch_size, shuffle=False, dtype=params.dtype):
        probs_parts.append(forward(params, batch.images, training=False))
        label_parts.append(batch.labels)
    probs = np.concatenate(probs_parts)
    labels = np.concatenate(label_parts).astype(float)
    value, _ = loss(probs.astype(float), labels, config.loss, weights=params.weights())
    acc = float(np.mean(predict(probs) == np.argmax(labels, axis=1)))
    return value, acc


def train(
    params: ModelParams,
    dataset: LabeledDataset,
    config: TrainConfig,
    start_epoch: int = 0,
) -> TrainResult:
    """Train in place from ``params``; returns best/final parameters and history.

    ``start_epoch`` exists so a run resumed from a checkpoint derives the
    same per-epoch shuffle and dropout seeds as the uninterrupted run.
    """
    history = TrainHistory()
    best_acc = -1.0
    best_params = params.copy()
    best_val_loss = np.inf
    stall = 0
    history.stop_reason = "max_epochs"
    for epoch in range(start_epoch, config.max_epochs):
        batch_losses, batch_sizes = [], []
        dropout_rng_seed = [config.seed, epoch, 1]
        for b_idx, batch in enumerate(
            batch_iter(dataset, "train", config.batch_size, seed=[config.seed, epoch, 0], shuffle=True, dtype=params.dtype)
        ):
            try:
                value, grads = loss_and_gradients(
                    params, batch.images, batch.labels, config.loss,
                    training=True, dropout_seed=[*dropout_rng_seed, b_idx],
                )
            except LossError as exc:
                # shapes are consistent by construction, so a loss-level
                # rejection mid-run means the outputs went non-finite
                raise TrainingDiverged(f"degenerate model output at epoch {epoch}, batch {b_idx}") from exc
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b_idx}")
            adam_step(params, grads, lr=config.learning_rate)
            batch_losses.append(value)
            batch_sizes.append(batch.images.shape[0])
        train_loss = float(np.average(batch_losses, weights=batch_sizes))
        try:
            val_loss, val_acc = _evaluate_split(params, dataset, "val", config)
        except LossError as exc:
            raise TrainingDiverged(f"degenerate model output at epoch {epoch} validation") from exc
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        history.epochs.append(EpochStats(epoch, train_loss, val_loss, val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = params.copy()
            history.best_epoch = epoch
        if val_loss < best_val_loss:
            best_val_loss = val_loss
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                history.stop_reason = "early_stop"
                break
    return TrainResult(best_params=best_params, final_params=params, history=history)
