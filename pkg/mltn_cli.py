#!/usr/bin/env python3
"""
Command-line entry point: train, crossval, bench, inspect, synth, evaluate.

Examples:
  mltn synth --out data --synth-count 640 --preview 16
  mltn train --model mltn --strides 2,2 --bond 3 --lr 5e-4 --batch 32 --epochs 50
  mltn crossval --config runs.ini --folds 5 --jobs 5
  mltn bench --models mltn,lotenet --strides 4,4 --bond 5
  mltn inspect --height 128 --width 128 --strides 4,4,4 --bond 5
"""

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import psutil

from checkpoint import load_checkpoint
from complexity import complexity_for, measured_flops
from data_metrics import fold_indices, save_preview, synth_blobs, write_idx
from errors import MltnError, ShapeMismatch
from train_config import TrainConfig, config_to_ini, load_config
from trainer import (
    EvalResult,
    RunSummary,
    build_model,
    crossval_fold,
    describe_chain,
    evaluate,
    first_layer_feature_dim,
    load_dataset,
    restore_model,
    time_epoch,
    train_run,
)

FOLDS_HEADER = ["fold", "best_epoch", "epochs_run", "val_acc", "val_auroc", "val_loss", "mean_epoch_seconds"]
AGGREGATE_HEADER = ["model", "folds", "auroc_mean", "auroc_std", "auroc", "acc_mean", "acc_std", "epoch_seconds", "params"]
BENCH_HEADER = [
    "model", "height", "width", "strides", "bond_dim", "params",
    "analytic_flops", "measured_mults", "epoch_seconds", "peak_rss_mb",
]


# --- Commands ---

def cmd_train(config: TrainConfig, run_name: Optional[str] = None) -> Path:
    """Train on every fold but config.val_fold; returns the run directory."""
    dataset = load_dataset(config)
    config.validate_for(dataset.height, dataset.width)
    run_dir = Path(config.out_dir) / (run_name or f"train-{config.model}-seed{config.seed}")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(config_to_ini(config), encoding="utf-8")
    train_run(config, dataset, run_dir)
    print(f"✅ Run written to {run_dir}")
    return run_dir


def _mean_std(values: List[float]) -> tuple:
    arr = np.asarray(values, dtype=np.float64)
    return float(np.mean(arr)), float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0


def cmd_crossval(config: TrainConfig, jobs: int = 1, run_name: Optional[str] = None) -> Dict[str, Any]:
    """One training run per fold, then folds.csv and a one-row aggregate.csv."""
    dataset = load_dataset(config)
    config.validate_for(dataset.height, dataset.width)
    root = Path(config.out_dir) / (run_name or f"crossval-{config.model}-seed{config.seed}")
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.ini").write_text(config_to_ini(config), encoding="utf-8")

    tasks = [(config.model_dump(mode="json"), fold, str(root / f"fold{fold}")) for fold in range(config.folds)]
    print(f"▶️ {config.folds}-fold cross-validation of {config.model} ({jobs} job{'s' if jobs > 1 else ''})")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries: List[RunSummary] = list(pool.map(crossval_fold, tasks))
    else:
        summaries = [train_run(config, dataset, run_dir, fold) for _, fold, run_dir in tasks]

    with open(root / "folds.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(FOLDS_HEADER)
        for s in summaries:
            writer.writerow([
                s.fold, s.best_epoch, s.epochs_run, f"{s.best_val_acc:.6f}", f"{s.best_val_auroc:.6f}",
                f"{s.best_val_loss:.6f}", f"{s.mean_epoch_seconds:.3f}",
            ])

    auroc_mean, auroc_std = _mean_std([s.best_val_auroc for s in summaries])
    acc_mean, acc_std = _mean_std([s.best_val_acc for s in summaries])
    aggregate = {
        "model": config.model,
        "folds": len(summaries),
        "auroc_mean": f"{auroc_mean:.6f}",
        "auroc_std": f"{auroc_std:.6f}",
        "auroc": f"{auroc_mean:.2f} ± {auroc_std:.2f}",
        "acc_mean": f"{acc_mean:.6f}",
        "acc_std": f"{acc_std:.6f}",
        "epoch_seconds": f"{float(np.mean([s.mean_epoch_seconds for s in summaries])):.3f}",
        "params": summaries[0].params,
    }
    with open(root / "aggregate.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=AGGREGATE_HEADER)
        writer.writeheader()
        writer.writerow(aggregate)
    print(f"📊 AUROC {aggregate['auroc']}, mean epoch {aggregate['epoch_seconds']}s")
    print(f"✅ Cross-validation written to {root}")
    return aggregate


def bench_row(config: TrainConfig, images: np.ndarray, labels: np.ndarray) -> Dict[str, Any]:
    """Parameter count, analytic and measured cost, and one timed epoch for one configuration."""
    height, width = images.shape[1:]
    config.validate_for(height, width)
    rng = np.random.default_rng(config.seed)
    calibration = images if config.calibrate_init else None
    model = build_model(config, height, width, rng, calibration)
    strides = config.effective_strides
    analytic = complexity_for(
        config.model, height, width, strides, first_layer_feature_dim(config), config.bond_dim, len(config.mlp_widths) + 1
    )
    measured = measured_flops(model, (height, width), images[:1])

    process = psutil.Process()
    peak = [process.memory_info().rss]

    def sample() -> None:
        peak[0] = max(peak[0], process.memory_info().rss)

    seconds = time_epoch(model, images, labels, min(config.batch_size, len(images)), config.resolved_lr, sample)
    return {
        "model": config.model,
        "height": height,
        "width": width,
        "strides": "-".join(str(k) for k in strides),
        "bond_dim": config.bond_dim,
        "params": model.param_count(),
        "analytic_flops": f"{analytic:.6g}",
        "measured_mults": measured,
        "epoch_seconds": f"{seconds:.4f}",
        "peak_rss_mb": f"{peak[0] / 2 ** 20:.1f}",
    }


def cmd_bench(config: TrainConfig, models: List[str], bonds: List[int], csv_path: Optional[str] = None) -> Path:
    """Emit one CSV row per (model, bond dimension) on a fixed synthetic batch."""
    size = config.bench_size
    data = synth_blobs(config.bench_images, size, size, config.seed)
    path = Path(csv_path) if csv_path else Path(config.out_dir) / "bench.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    print(f"▶️ Benchmarking {len(models) * len(bonds)} configuration(s) on {len(data)} images of {size}x{size}")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=BENCH_HEADER)
        writer.writeheader()
        for kind in models:
            for bond in bonds:
                row = bench_row(config.with_overrides(model=kind, bond_dim=bond), data.images, data.labels)
                writer.writerow(row)
                f.flush()
                print(
                    f"📊 {kind:8s} bond {bond}: {row['params']:,} params, {row['measured_mults']:,} mults, "
                    f"{row['epoch_seconds']}s/epoch"
                )
    print(f"✅ Bench written to {path}")
    return path


def cmd_inspect(config: TrainConfig, height: int, width: int) -> List[str]:
    lines = describe_chain(config, height, width)
    analytic = complexity_for(
        config.model, height, width, config.effective_strides, first_layer_feature_dim(config),
        config.bond_dim, len(config.mlp_widths) + 1,
    )
    lines.append(f"  analytic cost: {analytic:,.1f}")
    for line in lines:
        print(line)
    return lines


def cmd_synth(config: TrainConfig, preview: int = 0) -> List[Path]:
    dataset = synth_blobs(config.synth_count, config.synth_height, config.synth_width, config.seed)
    out = Path(config.out_dir)
    images_path = out / "synth-images.idx"
    labels_path = out / "synth-labels.idx"
    write_idx(dataset, images_path, labels_path)
    written = [images_path, labels_path]
    if preview > 0:
        written.append(save_preview(dataset, out / "synth-preview.png", columns=8, rows=-(-preview // 8)))
    print(f"💾 {len(dataset)} images of {dataset.height}x{dataset.width} written to {out}")
    return written


def cmd_evaluate(checkpoint_path: str, overrides: Dict[str, Any]) -> EvalResult:
    """Evaluate a saved model on the held-out fold of its (optionally overridden) dataset."""
    ckpt = load_checkpoint(checkpoint_path)
    data_keys = {"data_source", "images_path", "labels_path", "synth_count", "synth_height", "synth_width", "seed", "folds"}
    config = ckpt.config.with_overrides(**{k: v for k, v in overrides.items() if k in data_keys and v is not None})
    dataset = load_dataset(config)
    if (dataset.height, dataset.width) != tuple(ckpt.input_shape):
        raise ShapeMismatch(f"checkpoint expects {ckpt.input_shape} images, dataset has {dataset.height}x{dataset.width}")
    model = restore_model(ckpt)
    _, val_idx = fold_indices(dataset.fold_of, config.val_fold)
    result = evaluate(model, dataset.images[val_idx], dataset.labels[val_idx], config.batch_size)
    print(f"📊 epoch {ckpt.epoch}: loss {result.loss:.4f}, accuracy {result.accuracy:.3f}, AUROC {result.auroc:.3f}")
    return result


# --- Argument parsing ---

def _int_list(text: str) -> List[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from e


def _str_list(text: str) -> List[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file with [model], [train], [data] sections")
    common.add_argument("--model", choices=["mltn", "lotenet", "tenetx", "mlp"], help="Model family")
    common.add_argument("--strides", type=_int_list, help="Per-layer squeeze strides, e.g. 4,4,4")
    common.add_argument("--bond", type=int, help="Bond dimension")
    common.add_argument("--classes", type=int, help="Number of classes")
    common.add_argument("--feature-map", choices=["squeeze", "sinusoidal", "linear"], help="Local pixel feature map")
    common.add_argument("--lr", type=float, help="Adam learning rate (default 5e-6 for mltn, 5e-4 otherwise)")
    common.add_argument("--batch", type=int, help="Minibatch size (default 512)")
    common.add_argument("--epochs", type=int, help="Maximum epochs (default 200)")
    common.add_argument("--patience", type=int, help="Early-stopping patience in epochs (default 10)")
    common.add_argument("--folds", type=int, help="Number of cross-validation folds (default 5)")
    common.add_argument("--seed", type=int, help="Random seed")
    common.add_argument("--clip", type=float, help="Clip gradients to this global L2 norm (default off)")
    common.add_argument("--out", help="Output directory (default runs, or MLTN_OUT_DIR)")
    common.add_argument("--images", help="IDX image file (switches the data source to idx)")
    common.add_argument("--labels", help="IDX label file")
    common.add_argument("--synth-count", type=int, help="Synthetic sample count (default 640)")
    common.add_argument("--synth-size", type=int, help="Synthetic image side length (default 16)")
    common.add_argument("--no-progress", action="store_true", help="Hide progress bars")
    return common


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    values = {
        "model": args.model,
        "strides": args.strides,
        "bond_dim": args.bond,
        "class_count": args.classes,
        "feature_map": args.feature_map,
        "lr": args.lr,
        "batch_size": args.batch,
        "max_epochs": args.epochs,
        "patience": args.patience,
        "folds": args.folds,
        "seed": args.seed,
        "clip_norm": args.clip,
        "out_dir": args.out,
        "images_path": args.images,
        "labels_path": args.labels,
        "synth_count": args.synth_count,
        "synth_height": args.synth_size,
        "synth_width": args.synth_size,
    }
    if args.images or args.labels:
        values["data_source"] = "idx"
    if args.no_progress:
        values["progress"] = False
    return {k: v for k, v in values.items() if v is not None}


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="mltn", description="Multi-layered tensor network classifiers: train, cross-validate, benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="Train one model with early stopping")
    p.add_argument("--run-name", help="Run directory name under --out")

    p = sub.add_parser("crossval", parents=[common], help="K-fold cross-validation")
    p.add_argument("--jobs", type=int, default=1, help="Folds to train in parallel (default 1)")
    p.add_argument("--run-name", help="Run directory name under --out")

    p = sub.add_parser("bench", parents=[common], help="Parameters, cost and epoch time per configuration")
    p.add_argument("--models", type=_str_list, default=["mltn", "lotenet"], help="Comma-separated model kinds")
    p.add_argument("--bonds", type=_int_list, help="Comma-separated bond dimensions (default --bond)")
    p.add_argument("--csv", help="Output CSV path (default <out>/bench.csv)")

    p = sub.add_parser("inspect", parents=[common], help="Print the dimension chain and parameter counts")
    p.add_argument("--height", type=int, help="Image height (default synth size)")
    p.add_argument("--width", type=int, help="Image width (default synth size)")

    p = sub.add_parser("synth", parents=[common], help="Write a synthetic blob dataset as IDX files")
    p.add_argument("--preview", type=int, default=0, help="Also write a PNG contact sheet of this many images")

    p = sub.add_parser("evaluate", parents=[common], help="Evaluate a checkpoint on its held-out fold")
    p.add_argument("--checkpoint", required=True, help="Path to a .ckpt file")
    return parser


def main(argv: Optional[List[str]] = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = _overrides(args)
        if args.command == "evaluate":
            cmd_evaluate(args.checkpoint, overrides)
            return
        config = load_config(args.config, overrides)
        if args.command == "train":
            cmd_train(config, args.run_name)
        elif args.command == "crossval":
            cmd_crossval(config, max(1, args.jobs), args.run_name)
        elif args.command == "bench":
            cmd_bench(config, args.models, args.bonds or [config.bond_dim], args.csv)
        elif args.command == "inspect":
            cmd_inspect(config, args.height or config.synth_height, args.width or config.synth_width)
        elif args.command == "synth":
            cmd_synth(config, args.preview)
    except MltnError as e:
        print(f"❌ {e}")
        sys.exit(1)
    except KeyboardInterrupt:
        print("\n⏹️ Interrupted.")
        sys.exit(130)


if __name__ == "__main__":
    main()
