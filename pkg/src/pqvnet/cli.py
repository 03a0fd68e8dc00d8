"""Command-line front end: generate, train, eval, assess.

All four subcommands share one JSON run-configuration file.  Relative paths
inside it resolve as follows: the grid file relative to the config file's
directory, dataset/checkpoint/report paths relative to the output directory
(config ``out_dir``, overridable with ``--out``).  Runs are deterministic for
a fixed config and seed, apart from wall-clock fields in benchmark output.

Exit codes: 0 success, 1 oracle/classifier disagreement (assess), 2 bad
configuration, 3 convergence failure, 4 validation failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

EXIT_OK = 0
EXIT_DISAGREE = 1
EXIT_CONFIG = 2
EXIT_CONVERGENCE = 3
EXIT_VALIDATION = 4


class ConfigError(Exception):
    """Malformed or unusable run configuration."""


class ConvergenceError(Exception):
    """Too few sampled points survived the base-case power flow."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    seed: int = 0
    grid: Path = Path("grid.json")
    out_dir: Path = Path("out")
    dataset: str = "dataset.pqvd"
    checkpoint: str = "model.pqvm"
    sampler_spread: float = 0.35
    sampler_count: int = 20000
    threshold: float = 0.03
    omega_s: float = 2.0 * 3.141592653589793 * 50.0
    contingencies: list[int] | None = None
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    norm_scope: str = "train"
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 30
    learning_rate: float = 0.001
    phi: float = 1.0
    alpha: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    l2: float = 1e-4
    eps_clip: float = 1e-7
    kernels: tuple[int, ...] = (9, 7, 5)
    filters: tuple[int, ...] = (20, 40, 80)
    dense_units: int = 250
    dropout: float = 0.2
    cases: object = None  # None, "default", or list of {id, phi, alpha}
    ci_level: float = 0.99
    kmeans_k: tuple[int, ...] = (3, 5, 10, 20)

    @property
    def dataset_path(self) -> Path:
        return self.out_dir / self.dataset

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / self.checkpoint


_SECTIONS = {
    "seed", "grid", "out_dir", "dataset", "checkpoint",
    "sampler", "stability", "split", "train", "loss", "model", "cases", "eval",
}


def _section(raw: dict, name: str, allowed: set[str]) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    extra = set(sec) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) {sorted(extra)} in config section {name!r}")
    return sec


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    extra = set(raw) - _SECTIONS
    if extra:
        raise ConfigError(f"unknown top-level config key(s) {sorted(extra)}")

    cfg = RunConfig()
    try:
        cfg.seed = int(raw.get("seed", cfg.seed))
        base = path.resolve().parent
        grid = Path(raw.get("grid", cfg.grid))
        cfg.grid = grid if grid.is_absolute() else base / grid
        out_dir = Path(raw.get("out_dir", cfg.out_dir))
        cfg.out_dir = out_dir if out_dir.is_absolute() else base / out_dir
        cfg.dataset = str(raw.get("dataset", cfg.dataset))
        cfg.checkpoint = str(raw.get("checkpoint", cfg.checkpoint))

        sec = _section(raw, "sampler", {"spread", "count"})
        cfg.sampler_spread = float(sec.get("spread", cfg.sampler_spread))
        cfg.sampler_count = int(sec.get("count", cfg.sampler_count))

        sec = _section(raw, "stability", {"threshold", "omega_s", "contingencies"})
        cfg.threshold = float(sec.get("threshold", cfg.threshold))
        cfg.omega_s = float(sec.get("omega_s", cfg.omega_s))
        if sec.get("contingencies") is not None:
            cfg.contingencies = [int(c) for c in sec["contingencies"]]

        sec = _section(raw, "split", {"ratios", "norm_scope"})
        if "ratios" in sec:
            cfg.ratios = tuple(float(r) for r in sec["ratios"])  # type: ignore[assignment]
        cfg.norm_scope = str(sec.get("norm_scope", cfg.norm_scope))

        sec = _section(raw, "train", {"batch_size", "max_epochs", "patience", "learning_rate"})
        cfg.batch_size = int(sec.get("batch_size", cfg.batch_size))
        cfg.max_epochs = int(sec.get("max_epochs", cfg.max_epochs))
        cfg.patience = int(sec.get("patience", cfg.patience))
        cfg.learning_rate = float(sec.get("learning_rate", cfg.learning_rate))

        sec = _section(raw, "loss", {"phi", "alpha", "l2", "eps_clip"})
        cfg.phi = float(sec.get("phi", cfg.phi))
        if "alpha" in sec:
            cfg.alpha = tuple(float(a) for a in sec["alpha"])  # type: ignore[assignment]
        cfg.l2 = float(sec.get("l2", cfg.l2))
        cfg.eps_clip = float(sec.get("eps_clip", cfg.eps_clip))

        sec = _section(raw, "model", {"kernels", "filters", "dense_units", "dropout"})
        if "kernels" in sec:
            cfg.kernels = tuple(int(k) for k in sec["kernels"])
        if "filters" in sec:
            cfg.filters = tuple(int(f) for f in sec["filters"])
        cfg.dense_units = int(sec.get("dense_units", cfg.dense_units))
        cfg.dropout = float(sec.get("dropout", cfg.dropout))

        cfg.cases = raw.get("cases")

        sec = _section(raw, "eval", {"ci_level", "kmeans_k"})
        cfg.ci_level = float(sec.get("ci_level", cfg.ci_level))
        if "kmeans_k" in sec:
            cfg.kmeans_k = tuple(int(k) for k in sec["kmeans_k"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in config {path}: {exc}") from exc
    return cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _loss_config(cfg: RunConfig):
    from .nn import LossConfig

    return LossConfig(phi=cfg.phi, alpha=cfg.alpha, l2=cfg.l2, eps_clip=cfg.eps_clip)


def _train_config(cfg: RunConfig):
    from .train import TrainConfig

    return TrainConfig(
        batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs,
        patience=cfg.patience,
        learning_rate=cfg.learning_rate,
        loss=_loss_config(cfg),
        seed=cfg.seed,
    )


def cmd_generate(cfg: RunConfig) -> int:
    from .encoder import build_dataset, write_dataset
    from .grid import PowerFlowError, contingency_candidates, load_grid, sample_operating_points, solve_power_flow
    from .stability import DynamicParams, assess_security

    grid = load_grid(cfg.grid)
    dyn = DynamicParams.from_grid(grid, omega_s=cfg.omega_s)
    cands = cfg.contingencies if cfg.contingencies is not None else contingency_candidates(grid)
    points = sample_operating_points(grid, cfg.sampler_spread, cfg.sampler_count, cfg.seed)
    print(f"sampling {cfg.sampler_count} operating points (spread {cfg.sampler_spread}), "
          f"{len(cands)} contingencies: {cands}")
    snapshots, labels = [], []
    discarded = 0
    tick = max(1, len(points) // 10)
    for k, inj in enumerate(points):
        try:
            snap = solve_power_flow(grid, inj)
        except PowerFlowError:
            discarded += 1
            continue
        labels.append(assess_security(grid, snap, dyn, contingencies=cands, threshold=cfg.threshold))
        snapshots.append(snap)
        if (k + 1) % tick == 0:
            print(f"  labeled {k + 1}/{len(points)}")
    if len(snapshots) < 10:
        raise ConvergenceError(
            f"only {len(snapshots)} of {cfg.sampler_count} sampled points converged; grid/sampler misconfigured"
        )
    dataset = build_dataset(grid, snapshots, labels, ratios=cfg.ratios, seed=cfg.seed, norm_scope=cfg.norm_scope)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_dataset(dataset, cfg.dataset_path)
    print(f"dataset: {dataset.size} points ({discarded} discarded as infeasible) -> {cfg.dataset_path}")
    print(f"safe share: total {dataset.safe_share():.4f}  "
          + "  ".join(f"{s} {dataset.safe_share(s):.4f}" for s in ("train", "val", "test")))
    print(f"norms: max_p {dataset.norms.max_p:.6g}  max_q {dataset.norms.max_q:.6g}  max_v {dataset.norms.max_v:.6g}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    from .encoder import read_dataset
    from .nn import classifier_chain, init_params, save_checkpoint
    from .train import train

    dataset = read_dataset(cfg.dataset_path)
    chain = classifier_chain(
        kernels=cfg.kernels, filters=cfg.filters, dense_units=cfg.dense_units, dropout_rate=cfg.dropout
    )
    params = init_params(chain, (dataset.n_buses, dataset.n_buses, 3), seed=cfg.seed)
    tc = _train_config(cfg)
    print(f"training: batch_size {tc.batch_size}, max_epochs {tc.max_epochs}, patience {tc.patience}, "
          f"learning_rate {tc.learning_rate}, phi {tc.loss.phi}, alpha {tc.loss.alpha}, "
          f"l2 {tc.loss.l2}, seed {tc.seed}, {params.n_params()} parameters")
    result = train(params, dataset, tc)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.best_params, cfg.checkpoint_path)
    result.history.to_csv(cfg.out_dir / "history.csv")
    last = result.history.epochs[-1]
    best = result.history.epochs[result.history.best_epoch - result.history.epochs[0].epoch]
    print(f"stopped after epoch {last.epoch} ({result.history.stop_reason}); "
          f"best epoch {result.history.best_epoch} with val_acc {best.val_acc:.4f}")
    print(f"checkpoint -> {cfg.checkpoint_path}")
    return EXIT_OK


def _case_specs(cfg: RunConfig):
    from .evaluate import CaseSpec, default_cases

    if cfg.cases is None:
        return None
    if cfg.cases == "default":
        return default_cases()
    if not isinstance(cfg.cases, list):
        raise ConfigError('config "cases" must be null, "default", or a list')
    specs = []
    for k, rec in enumerate(cfg.cases):
        if not isinstance(rec, dict) or set(rec) - {"id", "phi", "alpha"}:
            raise ConfigError(f"cases[{k}] must be an object with keys id, phi, alpha")
        specs.append(
            CaseSpec(str(rec.get("id", k + 1)), float(rec["phi"]), tuple(float(a) for a in rec["alpha"]))
        )
    return tuple(specs)


def cmd_eval(cfg: RunConfig) -> int:
    import csv

    import numpy as np

    from .encoder import read_dataset
    from .evaluate import (
        balanced_phi,
        evaluate_split,
        export_conv1_weights,
        injection_features,
        misclassification_report,
        run_cases,
        write_radar_csv,
    )
    from .nn import classifier_chain, load_checkpoint

    dataset = read_dataset(cfg.dataset_path)
    params = load_checkpoint(cfg.checkpoint_path)
    expected = (dataset.n_buses, dataset.n_buses, 3)
    if tuple(params.input_shape) != expected:
        raise ValueError(f"checkpoint expects input {tuple(params.input_shape)}, dataset is {expected}")

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    cm, report, mis_idx = evaluate_split(params, dataset, "test", ci_level=cfg.ci_level)
    with open(cfg.out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value", f"ci{cfg.ci_level:g}_half_width"])
        writer.writerow(["tp", cm.tp, ""])
        writer.writerow(["fn", cm.fn, ""])
        writer.writerow(["fp", cm.fp, ""])
        writer.writerow(["tn", cm.tn, ""])
        for name, value in report.as_row().items():
            hw = (report.half_widths or {}).get(name)
            writer.writerow([name, "undefined" if value is None else f"{value:.9g}",
                             "" if hw is None else f"{hw:.9g}"])
    print(f"test confusion: tp {cm.tp}  fn {cm.fn}  fp {cm.fp}  tn {cm.tn}")
    rows = report.as_row()
    print("test metrics: " + "  ".join(
        f"{k} {('undefined' if v is None else f'{v:.4f}')}" for k, v in rows.items()))
    print(f"balanced phi (safe/unsafe): {balanced_phi(dataset.is_safe):.4f}")

    test_idx = dataset.splits["test"]
    pos_of = {int(d): p for p, d in enumerate(test_idx)}
    features = injection_features(dataset)[test_idx]
    mis_pos = np.array([pos_of[int(i)] for i in mis_idx], dtype=int)
    mreport = misclassification_report(features, mis_pos, k_list=cfg.kmeans_k, seed=cfg.seed)
    mreport.to_csv(cfg.out_dir / "misclassification.csv")
    for row in mreport.rows:
        print(f"kmeans k={row['k']}: {row['concentration']:.3f} of {row['misclassified']} "
              f"misclassified points in cluster {row['top_cluster']}")
    if not mreport.rows:
        print(f"kmeans: {mreport.note}")

    export_conv1_weights(params, cfg.out_dir / "conv1_filters.ppm")

    specs = _case_specs(cfg)
    if specs:
        chain = classifier_chain(
            kernels=cfg.kernels, filters=cfg.filters, dense_units=cfg.dense_units, dropout_rate=cfg.dropout
        )
        results = run_cases(dataset, specs, _train_config(cfg), chain=chain)
        write_radar_csv(results, cfg.out_dir / "radar.csv")
        for res in results:
            row = res.report.as_row()
            print(f"case {res.spec.case_id}: " + "  ".join(
                f"{k} {('undefined' if v is None else f'{v:.4f}')}" for k, v in row.items()))
    return EXIT_OK


def cmd_assess(cfg: RunConfig, index: int, bench: int | None) -> int:
    from .encoder import encode_snapshot, read_dataset
    from .evaluate import bench_assessment
    from .grid import contingency_candidates, load_grid
    from .nn import forward, load_checkpoint, predict
    from .stability import DynamicParams, assess_security

    dataset = read_dataset(cfg.dataset_path)
    if not 0 <= index < dataset.size:
        raise ConfigError(f"--index must lie in [0, {dataset.size})")
    grid = load_grid(cfg.grid)
    if grid.n_buses != dataset.n_buses:
        raise ValueError("grid and dataset disagree on bus count")
    params = load_checkpoint(cfg.checkpoint_path)
    dyn = DynamicParams.from_grid(grid, omega_s=cfg.omega_s)
    cands = cfg.contingencies if cfg.contingencies is not None else contingency_candidates(grid)
    snapshot = dataset.snapshots[index]

    label = assess_security(grid, snapshot, dyn, contingencies=cands, threshold=cfg.threshold)
    img = encode_snapshot(snapshot, grid, dataset.norms).astype(params.dtype)[None]
    cnn_safe = bool(predict(forward(params, img, training=False))[0] == 1)
    print(f"sample {index}: oracle {'safe' if label.is_safe else 'unsafe'} "
          f"(min damping {label.min_damping:.4f}, worst contingency {label.worst_contingency}); "
          f"classifier {'safe' if cnn_safe else 'unsafe'}")

    if bench is not None:
        rep = bench_assessment(grid, dyn, cands, snapshot, params, dataset.norms,
                               repetitions=bench, threshold=cfg.threshold)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        (cfg.out_dir / "bench.txt").write_text(rep.to_text())
        print(rep.to_text(), end="")
        print(f"benchmark -> {cfg.out_dir / 'bench.txt'}")
    return EXIT_OK if cnn_safe == label.is_safe else EXIT_DISAGREE


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pqvnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("generate", "sample, label, and store a dataset"),
        ("train", "train the classifier on a stored dataset"),
        ("eval", "evaluate a checkpoint on the test split"),
        ("assess", "assess one stored operating point with oracle and classifier"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override config out_dir")
        p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP thread pools")
        if name == "assess":
            p.add_argument("--index", type=int, default=0, help="dataset sample to assess")
            p.add_argument("--bench", type=int, default=None, metavar="REPS",
                           help="also benchmark oracle vs classifier over REPS repetitions")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be positive", file=sys.stderr)
            return EXIT_CONFIG
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = Path(args.out)

    from .encoder import DatasetError
    from .grid import GridError, GridFormatError, GridValidationError, IslandingError, PowerFlowError
    from .nn import CheckpointError, LossError, ModelError
    from .train import TrainingDiverged

    try:
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_assess(cfg, args.index, args.bench)
    except (ConfigError, GridFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, PowerFlowError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (GridValidationError, IslandingError, DatasetError, CheckpointError,
            ModelError, LossError, ValueError, GridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    raise SystemExit(main())
