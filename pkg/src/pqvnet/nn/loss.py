"""Weighted, metric-augmented classification loss.

The objective is a class-weighted binary cross-entropy on the unsafe-class
probability, minus a weighted sum of differentiable metric estimators
(recall, specificity, precision, F1) built from soft confusion counts, plus
an L2 penalty on weights:

    L = -(1/m) sum_i [ phi * y_i log(p_i) + (1 - y_i) log(1 - p_i) ]
        - a_r R - a_s S - a_p P - a_f F1
        + (lambda/2) sum W^2

where y_i and p_i are the unsafe-class label and predicted probability.
Probabilities entering the logs are clipped to [eps_clip, 1 - eps_clip]; the
soft counts use the raw probabilities.  All gradients here are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

UNSAFE, SAFE = 0, 1  # one-hot column convention: [1, 0] marks unsafe

_GUARD = 1e-12  # added to every metric denominator


class LossError(Exception):
    """Invalid loss configuration or malformed inputs."""


@dataclass(frozen=True)
class LossConfig:
    """phi weights the unsafe-class log term; alpha = (recall, specificity,
    precision, f1) weights the metric bonuses; l2 scales the weight penalty."""

    phi: float = 1.0
    alpha: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    l2: float = 1e-4
    eps_clip: float = 1e-7

    def __post_init__(self):
        if not self.phi > 0:
            raise LossError("phi must be positive")
        if len(self.alpha) != 4 or any(a < 0 for a in self.alpha):
            raise LossError("alpha must be four non-negative weights")
        if self.l2 < 0:
            raise LossError("l2 must be non-negative")
        if not 0.0 < self.eps_clip < 0.5:
            raise LossError("eps_clip must lie in (0, 0.5)")


def soft_confusion(probs: np.ndarray, labels: np.ndarray) -> tuple[float, float, float, float]:
    """Differentiable confusion sums (tp, fn, fp, tn) from probabilities.

    tp = sum p_unsafe over actual-unsafe rows, fn its complement, and
    likewise fp/tn over actual-safe rows, so tp+fn+fp+tn equals the batch
    size exactly.
    """
    _check_rows(probs, labels)
    p = probs[:, UNSAFE]
    y = labels[:, UNSAFE]
    tp = float(np.sum(p * y))
    fn = float(np.sum((1.0 - p) * y))
    fp = float(np.sum(p * (1.0 - y)))
    tn = float(np.sum((1.0 - p) * (1.0 - y)))
    return tp, fn, fp, tn


def _check_rows(probs: np.ndarray, labels: np.ndarray) -> None:
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise LossError("probs must be (m, 2)")
    if labels.shape != probs.shape:
        raise LossError("labels must match probs shape")
    if probs.shape[0] == 0:
        raise LossError("empty batch")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise LossError("probability rows must sum to 1")


def loss(
    probs: np.ndarray,
    labels: np.ndarray,
    config: LossConfig,
    weights: Sequence[np.ndarray] | None = None,
) -> tuple[float, np.ndarray]:
    """Loss value and its gradient w.r.t. the probability matrix.

    ``weights`` feeds only the L2 term (biases are never penalized); the
    matching parameter-space gradient is simply ``config.l2 * W`` per weight
    and is added by the model-level backward pass.
    """
    _check_rows(probs, labels)
    m = probs.shape[0]
    p = np.asarray(probs[:, UNSAFE], dtype=float)
    y = np.asarray(labels[:, UNSAFE], dtype=float)
    eps = config.eps_clip
    phi = config.phi

    pc = np.clip(p, eps, 1.0 - eps)
    in_band = ((p > eps) & (p < 1.0 - eps)).astype(float)
    ce = -np.mean(phi * y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    d_ce = -(phi * y / pc - (1.0 - y) / (1.0 - pc)) / m * in_band

    a_r, a_s, a_p, a_f = config.alpha
    tp, fn, fp, tn = soft_confusion(probs, labels)
    d_metric = np.zeros_like(p)
    metric_value = 0.0
    if a_r or a_f:
        den_r = tp + fn + _GUARD
        rec = tp / den_r
        d_rec = y / den_r
    if a_s:
        den_s = tn + fp + _GUARD
        spe = tn / den_s
        metric_value += a_s * spe
        d_metric += a_s * (-(1.0 - y) / den_s)
    if a_p or a_f:
        den_p = tp + fp + _GUARD
        pre = tp / den_p
        d_pre = (y * den_p - tp) / den_p**2
    if a_r:
        metric_value += a_r * rec
        d_metric += a_r * d_rec
    if a_p:
        metric_value += a_p * pre
        d_metric += a_p * d_pre
    if a_f:
        den_f = pre + rec + _GUARD
        f1 = 2.0 * pre * rec / den_f
        metric_value += a_f * f1
        d_f1 = 2.0 * ((d_pre * rec + pre * d_rec) * den_f - pre * rec * (d_pre + d_rec)) / den_f**2
        d_metric += a_f * d_f1

    l2_value = 0.0
    if weights is not None and config.l2 > 0:
        l2_value = 0.5 * config.l2 * float(sum(np.sum(np.square(w, dtype=float)) for w in weights))

    value = float(ce - metric_value + l2_value)
    grad = np.zeros_like(probs, dtype=float)
    grad[:, UNSAFE] = d_ce - d_metric
    return value, grad


def weight_decay_grads(weights: Sequence[np.ndarray], config: LossConfig) -> list[np.ndarray]:
    """Parameter-space gradient of the L2 term: lambda * W per weight tensor."""
    return [config.l2 * w for w in weights]
