"""Objective function tests.

Strategy: every metric bonus term is isolated by differencing the loss
against an alpha=0 baseline on the same batch, and the combined gradient is
checked with finite differences taken along the probability simplex
(p_unsafe + h, p_safe - h keeps rows valid).
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pqvnet.nn.loss import (
    _GUARD,
    SAFE,
    UNSAFE,
    LossConfig,
    LossError,
    loss,
    soft_confusion,
    weight_decay_grads,
)


def _batch(seed, m=32, p_lo=0.05, p_hi=0.95):
    rng = np.random.default_rng(seed)
    p = rng.uniform(p_lo, p_hi, size=m)
    probs = np.stack([p, 1.0 - p], axis=1)
    y = (rng.random(m) < 0.4).astype(float)
    labels = np.stack([y, 1.0 - y], axis=1)
    return probs, labels


def bce_oracle(probs, labels, eps):
    p = np.clip(probs[:, UNSAFE], eps, 1.0 - eps)
    y = labels[:, UNSAFE]
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


# ---------------------------------------------------------------------------
# cross-entropy backbone
# ---------------------------------------------------------------------------


def test_plain_config_reduces_to_mean_bce():
    cfg = LossConfig(phi=1.0, alpha=(0, 0, 0, 0), l2=0.0)
    for seed in range(20):
        probs, labels = _batch(seed)
        value, _ = loss(probs, labels, cfg)
        assert abs(value - bce_oracle(probs, labels, cfg.eps_clip)) < 1e-12


def test_phi_scales_only_the_unsafe_term():
    probs, labels = _batch(3)
    values = []
    for phi in (1.0, 2.0, 3.0):
        v, _ = loss(probs, labels, LossConfig(phi=phi, l2=0.0))
        values.append(v)
    # linear in phi: equal successive increments
    assert values[1] - values[0] == pytest.approx(values[2] - values[1], abs=1e-12)
    # the increment is the unsafe-class log term alone
    p = probs[:, UNSAFE]
    y = labels[:, UNSAFE]
    unsafe_term = float(-np.mean(y * np.log(p)))
    assert values[1] - values[0] == pytest.approx(unsafe_term, abs=1e-12)


def test_all_safe_batch_ignores_phi():
    probs, labels = _batch(4)
    labels = np.tile([0.0, 1.0], (probs.shape[0], 1))
    v1, g1 = loss(probs, labels, LossConfig(phi=1.0, l2=0.0))
    v9, g9 = loss(probs, labels, LossConfig(phi=9.0, l2=0.0))
    assert v1 == pytest.approx(v9, abs=1e-15)
    assert np.allclose(g1, g9)


# ---------------------------------------------------------------------------
# soft confusion counts
# ---------------------------------------------------------------------------


def test_soft_confusion_hand_values():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
    labels = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    tp, fn, fp, tn = soft_confusion(probs, labels)
    assert tp == pytest.approx(0.9)
    assert fn == pytest.approx(0.1)
    assert fp == pytest.approx(0.8)
    assert tn == pytest.approx(1.2)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 64))
def test_soft_confusion_partitions_the_batch(seed, m):
    probs, labels = _batch(seed, m=m, p_lo=0.0, p_hi=1.0)
    tp, fn, fp, tn = soft_confusion(probs, labels)
    assert tp + fn + fp + tn == pytest.approx(m, abs=1e-9)
    assert min(tp, fn, fp, tn) >= 0.0
    # row counts split by actual class
    assert tp + fn == pytest.approx(labels[:, UNSAFE].sum(), abs=1e-9)


def test_hard_probabilities_recover_integer_counts():
    probs = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    labels = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    assert soft_confusion(probs, labels) == (2.0, 0.0, 1.0, 1.0)


# ---------------------------------------------------------------------------
# metric bonus terms (isolated by differencing against alpha = 0)
# ---------------------------------------------------------------------------


def _term_delta(probs, labels, alpha):
    base_v, base_g = loss(probs, labels, LossConfig(l2=0.0))
    v, g = loss(probs, labels, LossConfig(alpha=alpha, l2=0.0))
    return v - base_v, g - base_g


def test_recall_term_value_and_gradient():
    probs, labels = _batch(7)
    tp, fn, fp, tn = soft_confusion(probs, labels)
    dv, dg = _term_delta(probs, labels, (0.7, 0, 0, 0))
    den = tp + fn + _GUARD
    assert dv == pytest.approx(-0.7 * tp / den, abs=1e-12)
    assert np.allclose(dg[:, UNSAFE], -0.7 * labels[:, UNSAFE] / den)
    assert np.all(dg[:, SAFE] == 0.0)


def test_specificity_term_value_and_gradient():
    probs, labels = _batch(8)
    tp, fn, fp, tn = soft_confusion(probs, labels)
    dv, dg = _term_delta(probs, labels, (0, 0.3, 0, 0))
    den = tn + fp + _GUARD
    assert dv == pytest.approx(-0.3 * tn / den, abs=1e-12)
    assert np.allclose(dg[:, UNSAFE], 0.3 * (1.0 - labels[:, UNSAFE]) / den)


def test_precision_term_value_and_gradient():
    probs, labels = _batch(9)
    tp, fn, fp, tn = soft_confusion(probs, labels)
    dv, dg = _term_delta(probs, labels, (0, 0, 0.5, 0))
    den = tp + fp + _GUARD
    assert dv == pytest.approx(-0.5 * tp / den, abs=1e-12)
    y = labels[:, UNSAFE]
    assert np.allclose(dg[:, UNSAFE], -0.5 * (y * den - tp) / den**2)


def test_f1_term_value():
    probs, labels = _batch(10)
    tp, fn, fp, tn = soft_confusion(probs, labels)
    dv, _ = _term_delta(probs, labels, (0, 0, 0, 1.0))
    rec = tp / (tp + fn + _GUARD)
    pre = tp / (tp + fp + _GUARD)
    f1 = 2.0 * pre * rec / (pre + rec + _GUARD)
    assert dv == pytest.approx(-f1, abs=1e-12)


# ---------------------------------------------------------------------------
# gradient fidelity along the simplex
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "config",
    [
        LossConfig(phi=1.0, l2=0.0),
        LossConfig(phi=2.0, alpha=(0.5, 0.0, 0.5, 0.5), l2=0.0),
        LossConfig(phi=3.0, alpha=(0.2, 0.4, 0.1, 0.9), l2=0.0),
    ],
)
def test_gradient_matches_simplex_finite_differences(config):
    probs, labels = _batch(13, m=24, p_lo=0.1, p_hi=0.9)
    _, grad = loss(probs, labels, config)
    assert np.all(grad[:, SAFE] == 0.0)
    h = 1e-6
    for i in range(probs.shape[0]):
        up = probs.copy()
        up[i, UNSAFE] += h
        up[i, SAFE] -= h
        down = probs.copy()
        down[i, UNSAFE] -= h
        down[i, SAFE] += h
        fd = (loss(up, labels, config)[0] - loss(down, labels, config)[0]) / (2.0 * h)
        denom = max(abs(fd), abs(grad[i, UNSAFE]), 1e-6)
        assert abs(fd - grad[i, UNSAFE]) / denom < 1e-6


# ---------------------------------------------------------------------------
# clipping band
# ---------------------------------------------------------------------------


def test_extreme_probabilities_are_clipped():
    cfg = LossConfig(phi=1.0, l2=0.0, eps_clip=1e-7)
    probs = np.array([[1.0, 0.0], [0.0, 1.0]])
    labels = np.array([[0.0, 1.0], [1.0, 0.0]])  # both rows maximally wrong
    value, grad = loss(probs, labels, cfg)
    assert np.isfinite(value)
    assert value == pytest.approx(-np.log(1e-7), rel=1e-9)
    # out-of-band rows carry no cross-entropy gradient
    assert np.all(grad == 0.0)


def test_in_band_rows_keep_their_gradient():
    cfg = LossConfig(phi=1.0, l2=0.0, eps_clip=0.01)
    probs = np.array([[0.5, 0.5], [0.001, 0.999]])
    labels = np.array([[1.0, 0.0], [1.0, 0.0]])
    _, grad = loss(probs, labels, cfg)
    assert grad[0, UNSAFE] != 0.0
    assert grad[1, UNSAFE] == 0.0  # clipped row is frozen


# ---------------------------------------------------------------------------
# weight penalty
# ---------------------------------------------------------------------------


def test_l2_value_and_decay_grads():
    probs, labels = _batch(15)
    w1 = np.full((3, 3), 2.0)
    w2 = np.ones((4,))
    cfg = LossConfig(l2=0.01)
    bare, _ = loss(probs, labels, LossConfig(l2=0.01))
    full, _ = loss(probs, labels, cfg, weights=[w1, w2])
    assert full - bare == pytest.approx(0.5 * 0.01 * (9 * 4.0 + 4.0), abs=1e-12)
    decay = weight_decay_grads([w1, w2], cfg)
    assert np.allclose(decay[0], 0.01 * w1)
    assert np.allclose(decay[1], 0.01 * w2)
    # l2 = 0 silences the term even with weights supplied
    z, _ = loss(probs, labels, LossConfig(l2=0.0), weights=[w1])
    b, _ = loss(probs, labels, LossConfig(l2=0.0))
    assert z == b


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(LossError):
        LossConfig(phi=0.0)
    with pytest.raises(LossError):
        LossConfig(alpha=(0.1, 0.2, 0.3))
    with pytest.raises(LossError):
        LossConfig(alpha=(0.1, -0.2, 0.3, 0.0))
    with pytest.raises(LossError):
        LossConfig(l2=-1e-9)
    with pytest.raises(LossError):
        LossConfig(eps_clip=0.0)
    with pytest.raises(LossError):
        LossConfig(eps_clip=0.6)


def test_input_validation():
    cfg = LossConfig()
    good_p = np.array([[0.4, 0.6]])
    good_y = np.array([[1.0, 0.0]])
    with pytest.raises(LossError):
        loss(np.array([[0.4, 0.7]]), good_y, cfg)  # rows must sum to 1
    with pytest.raises(LossError):
        loss(np.zeros((0, 2)), np.zeros((0, 2)), cfg)
    with pytest.raises(LossError):
        loss(good_p.ravel(), good_y.ravel(), cfg)
    with pytest.raises(LossError):
        loss(good_p, np.array([[1.0, 0.0], [0.0, 1.0]]), cfg)
