#!/usr/bin/env python3
"""
Training loop with early stopping on validation accuracy.

One run trains on every fold but the held-out one, evaluates after each
epoch, appends a row to metrics.csv, keeps best.ckpt at the best validation
accuracy seen so far and finishes with summary.json.
"""

import csv
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from data_metrics import Dataset, accuracy, fold_indices, load_idx, macro_auroc, synth_blobs
from errors import DataError, DegenerateLabels, NumericalError
from optim import AdamState, adam_step, clip_grad_norm, cross_entropy_with_logits
from tn_model import LotenetModel, MlpModel, MltnModel, assign_state, build_tenetx
from train_config import TrainConfig

METRICS_HEADER = ["epoch", "train_loss", "val_loss", "val_acc", "val_auroc", "seconds"]

PathLike = Union[str, Path]


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    auroc: float


@dataclass
class RunSummary:
    run_dir: str
    fold: int
    best_epoch: int
    best_val_acc: float
    best_val_auroc: float
    best_val_loss: float
    epochs_run: int
    mean_epoch_seconds: float
    params: int
    early_stopped: bool


# --- Model and data factories ---

def build_model(
    config: TrainConfig,
    height: int,
    width: int,
    rng: Optional[np.random.Generator] = None,
    calibration: Optional[np.ndarray] = None,
):
    """Instantiate the configured model family; raises ConfigError on a broken dimension chain."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    fmap = config.resolved_feature_map
    common = dict(
        output_site=config.output_site,
        noise=config.init_noise,
        rng=rng,
        calibration=calibration,
        bn_momentum=config.bn_momentum,
        bn_eps=config.bn_eps,
    )
    if config.model == "mltn":
        return MltnModel.build(height, width, config.strides, config.bond_dim, config.class_count, fmap, **common)
    if config.model == "tenetx":
        return build_tenetx(height, width, config.bond_dim, config.class_count, fmap, **common)
    if config.model == "lotenet":
        return LotenetModel.build(
            height, width, config.strides, config.bond_dim, config.class_count, fmap,
            channels=config.lotenet_channels, **common,
        )
    return MlpModel.build(height * width, list(config.mlp_widths) + [config.class_count], rng)


def first_layer_feature_dim(config: TrainConfig) -> int:
    """d for the analytic estimates: the post-squeeze feature dim of the first layer."""
    local_dim = config.resolved_feature_map.local_dim
    if config.model == "mlp":
        return 1
    if config.model == "tenetx":
        return local_dim
    k = config.strides[0]
    return k * k * local_dim


def load_dataset(config: TrainConfig) -> Dataset:
    if config.data_source == "idx":
        dataset = load_idx(config.images_path, config.labels_path)
    else:
        dataset = synth_blobs(config.synth_count, config.synth_height, config.synth_width, config.seed)
    if dataset.class_count > config.class_count:
        raise DataError(f"dataset has {dataset.class_count} classes but class_count = {config.class_count}")
    return dataset.with_folds(config.folds, config.seed)


def restore_model(ckpt: Checkpoint):
    height, width = ckpt.input_shape
    model = build_model(ckpt.config, height, width, np.random.default_rng(ckpt.config.seed))
    assign_state(model, ckpt.params, ckpt.buffers)
    return model


def load_model(path: PathLike):
    return restore_model(load_checkpoint(path))


# --- Loops ---

def _batches(indices: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def _check_gradients(grads: Dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name} (exploding gradients; lower the learning rate or set --clip)")


def train_step(model, images: np.ndarray, labels: np.ndarray, adam: AdamState, clip_norm: Optional[float] = None) -> float:
    logits, cache = model.forward(images, training=True)
    loss, grad_logits = cross_entropy_with_logits(logits, labels)
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")
    grads = model.backward(cache, grad_logits).params
    _check_gradients(grads)
    if clip_norm is not None:
        clip_grad_norm(grads, clip_norm)
    adam_step(model.parameters(), grads, adam)
    return loss


def evaluate(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 512) -> EvalResult:
    """Eval-mode loss, accuracy and AUROC; AUROC is nan when only one class is present."""
    logits = np.concatenate(
        [model.forward(images[idx], training=False)[0] for idx in _batches(np.arange(len(images)), batch_size)]
    )
    loss, _ = cross_entropy_with_logits(logits, labels)
    try:
        auc = macro_auroc(logits, labels)
    except DegenerateLabels:
        auc = float("nan")
    return EvalResult(loss, accuracy(logits, labels), auc)


def time_epoch(model, images: np.ndarray, labels: np.ndarray, batch_size: int, lr: float, on_step=None) -> float:
    """Wall seconds for one training epoch over the given batch."""
    adam = AdamState.for_params(model.parameters(), lr)
    start = time.perf_counter()
    for idx in _batches(np.arange(len(images)), batch_size):
        train_step(model, images[idx], labels[idx], adam)
        if on_step is not None:
            on_step()
    return time.perf_counter() - start


def train_run(
    config: TrainConfig,
    dataset: Dataset,
    run_dir: PathLike,
    fold: Optional[int] = None,
    progress: Optional[bool] = None,
) -> RunSummary:
    """Train one model holding out `fold` (default config.val_fold) for validation."""
    fold = config.val_fold if fold is None else fold
    progress = config.progress if progress is None else progress
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    height, width = dataset.height, dataset.width
    config.validate_for(height, width)

    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = fold_indices(dataset.fold_of, fold)
    calibration = dataset.images[train_idx[: config.batch_size]] if config.calibrate_init else None
    model = build_model(config, height, width, rng, calibration)
    adam = AdamState.for_params(model.parameters(), config.resolved_lr)
    n_params = model.param_count()
    val_images, val_labels = dataset.images[val_idx], dataset.labels[val_idx]

    tqdm.write(
        f"▶️  {config.model} fold {fold}: {len(train_idx)} train / {len(val_idx)} val, "
        f"{n_params:,} params, lr {config.resolved_lr:g}"
    )
    best = EvalResult(float("nan"), -1.0, float("nan"))
    best_epoch, epoch, early_stopped = 0, 0, False
    epoch_seconds: List[float] = []

    with open(run_dir / "metrics.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        for epoch in range(1, config.max_epochs + 1):
            start = time.perf_counter()
            order = rng.permutation(train_idx)
            total = 0.0
            bar = tqdm(
                list(_batches(order, config.batch_size)),
                desc=f"epoch {epoch}", leave=False, disable=not progress,
            )
            for idx in bar:
                try:
                    loss = train_step(model, dataset.images[idx], dataset.labels[idx], adam, config.clip_norm)
                except NumericalError as e:
                    raise NumericalError(f"epoch {epoch}: {e}") from e
                total += loss * len(idx)
                bar.set_postfix(loss=f"{loss:.4f}")
            seconds = time.perf_counter() - start
            epoch_seconds.append(seconds)
            train_loss = total / len(train_idx)
            val = evaluate(model, val_images, val_labels, config.batch_size)
            writer.writerow([epoch, f"{train_loss:.6f}", f"{val.loss:.6f}", f"{val.accuracy:.6f}", f"{val.auroc:.6f}", f"{seconds:.3f}"])
            f.flush()
            tqdm.write(
                f"📊 epoch {epoch:3d}  train {train_loss:.4f}  val {val.loss:.4f}  "
                f"acc {val.accuracy:.3f}  auroc {val.auroc:.3f}  ({seconds:.1f}s)"
            )

            if val.accuracy > best.accuracy:
                best, best_epoch = val, epoch
                save_checkpoint(
                    run_dir / "best.ckpt",
                    Checkpoint(config, model.parameters(), model.buffers(), adam, epoch, val.accuracy, (height, width)),
                )
                tqdm.write(f"💾 best.ckpt updated (val acc {val.accuracy:.3f})")
            elif epoch - best_epoch >= config.patience:
                early_stopped = True
                tqdm.write(f"⏹️  early stop: no improvement for {config.patience} epochs since epoch {best_epoch}")
                break

    summary = RunSummary(
        run_dir=str(run_dir),
        fold=fold,
        best_epoch=best_epoch,
        best_val_acc=best.accuracy,
        best_val_auroc=best.auroc,
        best_val_loss=best.loss,
        epochs_run=epoch,
        mean_epoch_seconds=float(np.mean(epoch_seconds)) if epoch_seconds else 0.0,
        params=n_params,
        early_stopped=early_stopped,
    )
    with open(run_dir / "summary.json", "w", encoding="utf-8") as f:
        json.dump(asdict(summary), f, indent=2)
    tqdm.write(f"✅ fold {fold}: best epoch {best_epoch}, val acc {best.accuracy:.3f}, auroc {best.auroc:.3f}")
    return summary


def crossval_fold(args: Tuple[Dict, int, str]) -> RunSummary:
    """Process-pool entry point: (config dict, fold, run dir)."""
    config_values, fold, run_dir = args
    config = TrainConfig.model_validate(config_values)
    return train_run(config, load_dataset(config), run_dir, fold, progress=False)


def describe_chain(config: TrainConfig, height: int, width: int) -> List[str]:
    """Human-readable dimension chain and parameter counts, without training."""
    config.validate_for(height, width)
    model = build_model(config, height, width, np.random.default_rng(config.seed))
    lines = [f"{config.model} on {height}x{width}, bond {config.bond_dim}, feature map {config.resolved_feature_map.value}"]
    lines += ["  " + line for line in model.describe()]
    lines.append(f"  total parameters: {model.param_count():,}")
    return lines

