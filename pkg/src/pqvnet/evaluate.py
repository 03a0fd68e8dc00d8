"""Evaluation: confusion metrics, loss-weight case sweeps, error clustering,
filter visualization, and the oracle-vs-classifier timing benchmark.

The positive class throughout is "unsafe" (one-hot column 0).  Ratio metrics
are computed as exact rationals and only then converted to float; a zero
denominator yields None ("undefined") rather than a silent zero.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import LabeledDataset, NormConstants, batch_iter, encode_snapshot, write_ppm
from .grid import GridModel, Snapshot
from .nn import ModelParams, forward, init_params, predict
from .stability import DynamicParams, assess_security
from .train import TrainConfig, TrainResult, train

__all__ = [
    "BenchReport",
    "CaseResult",
    "CaseSpec",
    "ConfusionMatrix",
    "EvaluationError",
    "KMeansResult",
    "MetricReport",
    "MisclassReport",
    "balanced_phi",
    "bench_assessment",
    "confidence_interval",
    "confusion",
    "default_cases",
    "evaluate_split",
    "export_conv1_weights",
    "kmeans",
    "metrics",
    "metrics_exact",
    "misclassification_report",
    "run_cases",
    "write_radar_csv",
]


class EvaluationError(Exception):
    """Malformed evaluation inputs."""


# ---------------------------------------------------------------------------
# confusion counts and ratio metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int  # predicted unsafe, actually unsafe
    fn: int  # predicted safe, actually unsafe
    fp: int  # predicted unsafe, actually safe
    tn: int  # predicted safe, actually safe

    def __post_init__(self):
        if min(self.tp, self.fn, self.fp, self.tn) < 0:
            raise EvaluationError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


def confusion(predictions: np.ndarray, labels: np.ndarray) -> ConfusionMatrix:
    """Tally class-index predictions against class-index labels (0 = unsafe)."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise EvaluationError("predictions and labels must be equal-length 1-D arrays")
    pred_unsafe = predictions == 0
    act_unsafe = labels == 0
    return ConfusionMatrix(
        tp=int(np.sum(pred_unsafe & act_unsafe)),
        fn=int(np.sum(~pred_unsafe & act_unsafe)),
        fp=int(np.sum(pred_unsafe & ~act_unsafe)),
        tn=int(np.sum(~pred_unsafe & ~act_unsafe)),
    )


def metrics_exact(cm: ConfusionMatrix) -> dict[str, Fraction | None]:
    """Ratio metrics as exact rationals; None where the denominator is zero."""

    def ratio(num: int, den: int) -> Fraction | None:
        return None if den == 0 else Fraction(num, den)

    rec = ratio(cm.tp, cm.tp + cm.fn)
    spe = ratio(cm.tn, cm.tn + cm.fp)
    pre = ratio(cm.tp, cm.tp + cm.fp)
    f1 = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn)
    acc = ratio(cm.tp + cm.tn, cm.total)
    return {"recall": rec, "specificity": spe, "precision": pre, "f1": f1, "accuracy": acc}


@dataclass(frozen=True)
class MetricReport:
    recall: float | None
    specificity: float | None
    precision: float | None
    f1: float | None
    accuracy: float | None
    mcc: float | None
    half_widths: dict[str, float] | None = None  # optional 99% CI half-widths

    def as_row(self) -> dict[str, float | None]:
        return {
            "recall": self.recall,
            "specificity": self.specificity,
            "precision": self.precision,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "mcc": self.mcc,
        }


def _mcc(cm: ConfusionMatrix) -> float | None:
    margins = [cm.tp + cm.fp, cm.tp + cm.fn, cm.tn + cm.fp, cm.tn + cm.fn]
    if any(m == 0 for m in margins):
        return None
    num = cm.tp * cm.tn - cm.fp * cm.fn
    return float(num / math.sqrt(math.prod(margins)))


def confidence_interval(p: float, n: int, level: float = 0.99) -> float:
    """Normal-approximation half-width z * sqrt(p (1-p) / n) for a proportion."""
    if not 0.0 <= p <= 1.0:
        raise EvaluationError("p must lie in [0, 1]")
    if n < 1:
        raise EvaluationError("n must be positive")
    if not 0.0 < level < 1.0:
        raise EvaluationError("level must lie in (0, 1)")
    z = statistics.NormalDist().inv_cdf(0.5 + level / 2.0)
    return z * math.sqrt(p * (1.0 - p) / n)


def metrics(cm: ConfusionMatrix, ci_level: float | None = None) -> MetricReport:
    """Float metric report from exact rationals; optionally attach CI half-widths.

    Half-widths use each proportion's own trial count (recall: actual
    unsafe, specificity: actual safe, precision: predicted unsafe, accuracy
    and f1: all samples).
    """
    ex = metrics_exact(cm)
    as_float = {k: (None if v is None else float(v)) for k, v in ex.items()}
    half = None
    if ci_level is not None:
        trials = {
            "recall": cm.tp + cm.fn,
            "specificity": cm.tn + cm.fp,
            "precision": cm.tp + cm.fp,
            "f1": cm.total,
            "accuracy": cm.total,
        }
        half = {
            k: confidence_interval(as_float[k], trials[k], ci_level)
            for k in trials
            if as_float[k] is not None and trials[k] > 0
        }
    return MetricReport(
        recall=as_float["recall"],
        specificity=as_float["specificity"],
        precision=as_float["precision"],
        f1=as_float["f1"],
        accuracy=as_float["accuracy"],
        mcc=_mcc(cm),
        half_widths=half,
    )


def balanced_phi(is_safe: np.ndarray) -> float:
    """Safe-to-unsafe population ratio: the phi that balances the class terms."""
    is_safe = np.asarray(is_safe)
    n_safe = int(np.sum(is_safe == 1))
    n_unsafe = int(np.sum(is_safe == 0))
    if n_unsafe == 0:
        raise EvaluationError("no unsafe samples; balanced phi undefined")
    return n_safe / n_unsafe


# ---------------------------------------------------------------------------
# split evaluation and case sweeps
# ---------------------------------------------------------------------------


def evaluate_split(
    params: ModelParams, dataset: LabeledDataset, split: str = "test", batch_size: int = 256,
    ci_level: float | None = None,
) -> tuple[ConfusionMatrix, MetricReport, np.ndarray]:
    """Confusion matrix, metric report, and misclassified dataset indices."""
    preds, actual, indices = [], [], []
    for batch in batch_iter(dataset, split, batch_size, shuffle=False, dtype=params.dtype):
        probs = forward(params, batch.images, training=False)
        preds.append(predict(probs))
        actual.append(np.argmax(batch.labels, axis=1))
        indices.append(batch.indices)
    pred = np.concatenate(preds)
    act = np.concatenate(actual)
    idx = np.concatenate(indices)
    cm = confusion(pred, act)
    return cm, metrics(cm, ci_level=ci_level), idx[pred != act]


@dataclass(frozen=True)
class CaseSpec:
    """One loss configuration in a sweep: phi plus the four metric weights."""

    case_id: str
    phi: float
    alpha: tuple[float, float, float, float]


def default_cases() -> tuple[CaseSpec, ...]:
    """The standard eight-case sweep over phi and metric-bonus weights."""
    return (
        CaseSpec("1", 1.0, (0.0, 0.0, 0.0, 0.0)),
        CaseSpec("2", 2.0, (0.0, 0.0, 0.0, 0.0)),
        CaseSpec("3", 5.0, (0.0, 0.0, 0.0, 0.0)),
        CaseSpec("4", 1.0, (0.5, 0.5, 0.5, 0.5)),
        CaseSpec("5", 1.0, (0.5, 0.0, 0.5, 0.5)),
        CaseSpec("6", 2.0, (0.5, 0.0, 0.5, 0.5)),
        CaseSpec("7", 3.0, (0.5, 0.0, 0.5, 0.5)),
        CaseSpec("8", 2.0, (0.0, 0.0, 0.5, 0.5)),
    )


@dataclass
class CaseResult:
    spec: CaseSpec
    cm: ConfusionMatrix
    report: MetricReport
    result: TrainResult


def run_cases(
    dataset: LabeledDataset,
    cases: Sequence[CaseSpec],
    base_config: TrainConfig,
    chain=None,
    init_seed: int | None = None,
) -> list[CaseResult]:
    """Train one model per case from identical seeds and evaluate on test.

    Identical case specs therefore produce identical rows.
    """
    from .nn import classifier_chain  # local to avoid import noise at module load

    chain = chain if chain is not None else classifier_chain()
    seed = base_config.seed if init_seed is None else init_seed
    out = []
    for case in cases:
        cfg = replace(base_config, loss=replace(base_config.loss, phi=case.phi, alpha=tuple(case.alpha)))
        params = init_params(chain, (dataset.n_buses, dataset.n_buses, 3), seed=seed)
        result = train(params, dataset, cfg)
        cm, report, _ = evaluate_split(result.best_params, dataset, "test")
        out.append(CaseResult(spec=case, cm=cm, report=report, result=result))
    return out


def write_radar_csv(results: Sequence[CaseResult], path: str | Path) -> None:
    """One row per case, one column per metric ("undefined" for None)."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "phi", "alpha_r", "alpha_s", "alpha_p", "alpha_f",
                         "recall", "specificity", "precision", "f1", "accuracy", "mcc"])
        for res in results:
            row = res.report.as_row()
            writer.writerow(
                [res.spec.case_id, f"{res.spec.phi:g}", *[f"{a:g}" for a in res.spec.alpha]]
                + [("undefined" if row[k] is None else f"{row[k]:.9g}")
                   for k in ("recall", "specificity", "precision", "f1", "accuracy", "mcc")]
            )


# ---------------------------------------------------------------------------
# k-means over misclassified points
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: list[float]  # within-cluster sum of squares after each assignment
    iterations: int


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iters: int = 300) -> KMeansResult:
    """Lloyd's algorithm with distance-weighted seeding.

    An update that empties a cluster re-seeds its centroid at the point
    farthest from its assigned centroid.  The recorded objective sequence is
    non-increasing; iteration stops at an assignment fixpoint.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise EvaluationError("points must be a non-empty (n, d) array")
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise EvaluationError(f"k must lie in [1, {n}]")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(n)]
    d2 = np.sum((pts - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centroids[j] = pts[idx]
        d2 = np.minimum(d2, np.sum((pts - centroids[j]) ** 2, axis=1))

    assignments = np.full(n, -1)
    objective: list[float] = []
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        dist2 = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(dist2, axis=1)
        objective.append(float(dist2[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        point_err = dist2[np.arange(n), assignments]
        for j in range(k):
            members = assignments == j
            if members.any():
                centroids[j] = pts[members].mean(axis=0)
            else:
                centroids[j] = pts[int(np.argmax(point_err))]
    return KMeansResult(assignments=assignments, centroids=centroids, objective=objective, iterations=iterations)


@dataclass
class MisclassReport:
    rows: list[dict]
    note: str = ""

    def to_csv(self, path: str | Path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "misclassified", "top_cluster", "concentration"])
            if not self.rows:
                writer.writerow(["-", 0, "-", self.note or "-"])
            for row in self.rows:
                writer.writerow([row["k"], row["misclassified"], row["top_cluster"], f"{row['concentration']:.9g}"])


def misclassification_report(
    features: np.ndarray,
    misclassified: np.ndarray,
    k_list: Sequence[int] = (3, 5, 10, 20),
    seed: int = 0,
) -> MisclassReport:
    """Cluster standardized features and measure where the errors concentrate.

    For each k, all points are clustered and the report row carries the
    largest fraction of the misclassified points landing in a single
    cluster.  Returns an empty-rows report when nothing was misclassified.
    """
    feats = np.asarray(features, dtype=float)
    if feats.ndim != 2:
        raise EvaluationError("features must be (n, d)")
    mis = np.asarray(misclassified, dtype=int)
    if mis.size == 0:
        return MisclassReport(rows=[], note="no misclassifications")
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std[std == 0] = 1.0
    z = (feats - mean) / std
    rows = []
    for k in k_list:
        if k > feats.shape[0]:
            continue
        res = kmeans(z, k, seed=seed)
        counts = np.bincount(res.assignments[mis], minlength=k)
        top = int(np.argmax(counts))
        rows.append(
            {"k": int(k), "misclassified": int(mis.size), "top_cluster": top,
             "concentration": float(counts[top] / mis.size)}
        )
    return MisclassReport(rows=rows)


def injection_features(dataset: LabeledDataset) -> np.ndarray:
    """Per-sample feature vector: net active and reactive demand at every bus."""
    return np.array([np.concatenate([s.p_net, s.q_net]) for s in dataset.snapshots])


# ---------------------------------------------------------------------------
# first-layer filter export
# ---------------------------------------------------------------------------


def export_conv1_weights(params: ModelParams, path: str | Path) -> np.ndarray:
    """Tile the first conv layer's kernels into one RGB raster and write a PPM.

    Channel 0 maps to red, 1 to green, 2 to blue; each input channel is
    min-max normalized over the whole layer.  Returns the tiled uint8 array.
    """
    first = params.tensors[0].value
    if first.ndim != 4 or first.shape[2] != 3:
        raise EvaluationError("first layer must be a conv over 3 input channels")
    w = np.asarray(first, dtype=float)
    k, f = w.shape[0], w.shape[3]
    lo = w.min(axis=(0, 1, 3), keepdims=True)
    hi = w.max(axis=(0, 1, 3), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    norm = (w - lo) / span
    cols = int(math.ceil(math.sqrt(f)))
    rows = int(math.ceil(f / cols))
    tile = np.zeros((rows * (k + 1) - 1, cols * (k + 1) - 1, 3))
    for i in range(f):
        r, c = divmod(i, cols)
        tile[r * (k + 1) : r * (k + 1) + k, c * (k + 1) : c * (k + 1) + k, :] = norm[:, :, :, i]
    rgb = np.clip(np.round(tile * 255.0), 0, 255).astype(np.uint8)
    write_ppm(rgb, path)
    return rgb


# ---------------------------------------------------------------------------
# timing benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchReport:
    oracle_ms: float
    cnn_ms: float
    ratio: float
    repetitions: int
    oracle_safe: bool
    cnn_safe: bool

    def to_text(self) -> str:
        return (
            f"repetitions: {self.repetitions}\n"
            f"oracle_ms: {self.oracle_ms:.6f}\n"
            f"cnn_ms: {self.cnn_ms:.6f}\n"
            f"ratio: {self.ratio:.3f}\n"
            f"oracle_safe: {str(self.oracle_safe).lower()}\n"
            f"cnn_safe: {str(self.cnn_safe).lower()}\n"
        )


def bench_assessment(
    grid: GridModel,
    dyn: DynamicParams,
    contingencies: Sequence[int],
    snapshot: Snapshot,
    params: ModelParams,
    norms: NormConstants,
    repetitions: int = 1000,
    threshold: float = 0.03,
) -> BenchReport:
    """Average wall time of the analytic chain vs. encode+infer on one point.

    Both sides run sequentially in this process (no worker pools); one
    untimed warm-up precedes each timed loop.
    """
    if repetitions < 1:
        raise EvaluationError("repetitions must be positive")
    label = assess_security(grid, snapshot, dyn, contingencies=contingencies, threshold=threshold)
    t0 = time.perf_counter()
    for _ in range(repetitions):
        assess_security(grid, snapshot, dyn, contingencies=contingencies, threshold=threshold)
    oracle_ms = (time.perf_counter() - t0) * 1000.0 / repetitions

    def infer() -> int:
        img = encode_snapshot(snapshot, grid, norms).astype(params.dtype)[None]
        return int(predict(forward(params, img, training=False))[0])

    cnn_class = infer()
    t0 = time.perf_counter()
    for _ in range(repetitions):
        infer()
    cnn_ms = (time.perf_counter() - t0) * 1000.0 / repetitions

    return BenchReport(
        oracle_ms=oracle_ms,
        cnn_ms=cnn_ms,
        ratio=oracle_ms / cnn_ms if cnn_ms > 0 else float("inf"),
        repetitions=repetitions,
        oracle_safe=label.is_safe,
        cnn_safe=bool(cnn_class == 1),
    )
