"""Training loop tests on a small model over the shared fixture dataset."""

import csv

import numpy as np
import pytest

from pqvnet.nn import classifier_chain, forward, init_params, predict
from pqvnet.nn.loss import LossConfig
from pqvnet.train import TrainConfig, TrainingDiverged, train

SMALL_IN = (9, 9, 3)


def small_params(seed=0):
    chain = classifier_chain(kernels=(3, 3), filters=(4, 6), dense_units=16)
    return init_params(chain, SMALL_IN, seed=seed)


def cfg(**kw):
    base = dict(batch_size=16, max_epochs=6, patience=10, learning_rate=0.003, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)


def test_training_reduces_loss(small_dataset):
    result = train(small_params(), small_dataset, cfg(max_epochs=8))
    losses = [e.train_loss for e in result.history.epochs]
    assert len(losses) == 8
    assert losses[-1] < losses[0]
    assert result.history.stop_reason == "max_epochs"
    # epochs are numbered consecutively from zero
    assert [e.epoch for e in result.history.epochs] == list(range(8))


def test_best_params_are_earliest_max_accuracy(small_dataset):
    result = train(small_params(), small_dataset, cfg(max_epochs=8))
    accs = [e.val_acc for e in result.history.epochs]
    want = int(np.argmax(accs))  # argmax returns the first maximum
    assert result.history.best_epoch == result.history.epochs[want].epoch

    # the returned best parameters really score that accuracy on the val split
    ds = small_dataset
    val = ds.splits["val"]
    images = np.stack([ds.encode(int(i)) for i in val]).astype(np.float32)
    hits = predict(forward(result.best_params, images)) == np.argmax(ds.labels[val], axis=1)
    assert float(hits.mean()) == pytest.approx(max(accs))


def test_early_stop_on_stalled_validation(small_dataset):
    # a step too small to move float32 weights freezes validation loss
    result = train(small_params(), small_dataset, cfg(learning_rate=1e-12, patience=2, max_epochs=30))
    assert result.history.stop_reason == "early_stop"
    assert len(result.history.epochs) == 3  # baseline epoch + two stalled ones
    losses = {e.val_loss for e in result.history.epochs}
    assert len(losses) == 1


def test_run_is_seed_deterministic(small_dataset):
    r1 = train(small_params(seed=4), small_dataset, cfg())
    r2 = train(small_params(seed=4), small_dataset, cfg())
    assert r1.history.epochs == r2.history.epochs
    for a, b in zip(r1.final_params.tensors, r2.final_params.tensors):
        assert np.array_equal(a.value, b.value)
        assert np.array_equal(a.m, b.m)

    r3 = train(small_params(seed=4), small_dataset, cfg(seed=2))
    assert r3.history.epochs != r1.history.epochs


def test_resume_replays_uninterrupted_run(small_dataset):
    straight = train(small_params(seed=7), small_dataset, cfg(max_epochs=4))

    params = small_params(seed=7)
    first = train(params, small_dataset, cfg(max_epochs=2))
    second = train(first.final_params, small_dataset, cfg(max_epochs=4), start_epoch=2)
    assert [e.epoch for e in second.history.epochs] == [2, 3]
    for a, b in zip(straight.final_params.tensors, second.final_params.tensors):
        assert np.array_equal(a.value, b.value)
        assert np.array_equal(a.v, b.v)
    assert straight.history.epochs[2:] == second.history.epochs


def test_divergence_raises(small_dataset):
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDiverged):
            train(small_params(), small_dataset, cfg(learning_rate=1e20))


def test_history_csv_round_trip(small_dataset, tmp_path):
    result = train(small_params(), small_dataset, cfg(max_epochs=3))
    path = tmp_path / "history.csv"
    result.history.to_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "val_acc"]
    assert len(rows) == 4
    for row, stats in zip(rows[1:], result.history.epochs):
        assert int(row[0]) == stats.epoch
        assert float(row[1]) == pytest.approx(stats.train_loss, rel=1e-8)
        assert float(row[3]) == pytest.approx(stats.val_acc, rel=1e-8)


def test_metric_augmented_config_trains(small_dataset):
    loss_cfg = LossConfig(phi=2.0, alpha=(0.5, 0.0, 0.5, 0.5), l2=1e-4)
    result = train(small_params(), small_dataset, cfg(max_epochs=4, loss=loss_cfg))
    assert len(result.history.epochs) == 4
    assert np.isfinite([e.train_loss for e in result.history.epochs]).all()
