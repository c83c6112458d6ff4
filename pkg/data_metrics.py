#!/usr/bin/env python3
"""
Datasets and evaluation metrics.

Reads and writes the IDX byte format (optionally gzip-compressed), generates
a deterministic synthetic blob-detection task, assigns k-fold splits and
computes accuracy and rank-based AUROC.

IDX layout (big-endian):
  [offset] [type]          [value]
  0000     32 bit integer  0x00000803 images / 0x00000801 labels
  0004     32 bit integer  dimension sizes, one per axis
  ....     unsigned byte   payload, row-major
"""

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy.stats import rankdata

from errors import CountMismatch, DataError, DegenerateLabels, FormatError, ShapeMismatch

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# Synthetic blob task
BACKGROUND_AMPLITUDE = 0.3
BLOB_PEAK = 1.0

PathLike = Union[str, Path]


@dataclass
class Dataset:
    images: np.ndarray          # [T, H, W], values in [0, 1]
    labels: np.ndarray          # [T] int
    fold_of: np.ndarray         # [T] fold id per sample
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.fold_of = np.asarray(self.fold_of, dtype=np.int64)
        if self.images.ndim != 3:
            raise ShapeMismatch(f"images must be [T, H, W], got {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.fold_of) != len(self.images):
            raise CountMismatch(
                f"{len(self.images)} images, {len(self.labels)} labels, {len(self.fold_of)} fold ids"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("image intensities must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def class_count(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.fold_of[idx], dict(self.metadata))

    def with_folds(self, folds: int, seed: int) -> "Dataset":
        return Dataset(self.images, self.labels, kfold_split(len(self), folds, seed), dict(self.metadata))


# --- IDX format ---

def _open(path: PathLike, mode: str):
    path = Path(path)
    if "r" in mode:
        with open(path, "rb") as f:
            gzipped = f.read(2) == b"\x1f\x8b"
    else:
        gzipped = path.suffix == ".gz"
    return gzip.open(path, mode) if gzipped else open(path, mode)


def _read_idx(path: PathLike, expected_magic: int) -> np.ndarray:
    try:
        with _open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError as e:
        raise DataError(f"IDX file not found: {path}") from e
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e

    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    n_dims = magic & 0xFF
    header = 4 + 4 * n_dims
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{n_dims}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < expected:
        raise FormatError(f"{path}: header promises {expected} bytes, found {len(payload)}")
    return np.frombuffer(payload[:expected], dtype=np.uint8).reshape(dims)


def load_idx(images_path: PathLike, labels_path: PathLike) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled by 1/255."""
    images = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise CountMismatch(f"{len(images)} images but {len(labels)} labels")
    metadata = {"source": "idx", "images": str(images_path), "labels": str(labels_path)}
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), np.zeros(len(labels)), metadata)


def _write_idx(path: PathLike, magic: int, payload: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "wb") as f:
        f.write(struct.pack(f">I{payload.ndim}I", magic, *payload.shape))
        f.write(np.ascontiguousarray(payload, dtype=np.uint8).tobytes())


def write_idx(dataset: Dataset, images_path: PathLike, labels_path: PathLike) -> None:
    """Inverse of load_idx for intensities on the 1/255 grid."""
    if dataset.labels.size and (dataset.labels.min() < 0 or dataset.labels.max() > 255):
        raise DataError("IDX labels must fit in one unsigned byte")
    _write_idx(images_path, IMAGE_MAGIC, np.rint(dataset.images * 255.0).astype(np.uint8))
    _write_idx(labels_path, LABEL_MAGIC, dataset.labels.astype(np.uint8))


# --- Synthetic data ---

def synth_blobs(count: int, height: int, width: int, seed: int) -> Dataset:
    """Balanced blob-presence task.

    Every image is uniform background noise of amplitude 0.3; class 1 adds a
    Gaussian blob of peak 1.0 and sigma min(H, W)/8 at a random centre.
    Intensities are clipped to [0, 1] and quantised to the 1/255 grid.
    """
    if height < 8 or width < 8:
        raise DataError(f"synthetic images need H, W >= 8, got {height}x{width}")
    if count < 2:
        raise DataError(f"need at least 2 samples for a balanced task, got {count}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % 2)
    images = BACKGROUND_AMPLITUDE * rng.random((count, height, width))

    sigma = min(height, width) / 8.0
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    centres = rng.uniform([height / 4, width / 4], [3 * height / 4, 3 * width / 4], size=(count, 2))
    for i in np.flatnonzero(labels == 1):
        cy, cx = centres[i]
        images[i] += BLOB_PEAK * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * sigma ** 2))

    images = np.rint(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    metadata = {"source": "synth", "seed": seed, "height": height, "width": width}
    return Dataset(images, labels, np.zeros(count), metadata)


def save_preview(dataset: Dataset, path: PathLike, columns: int = 8, rows: int = 2) -> Path:
    """Tile the first rows*columns images into a greyscale PNG."""
    n = min(len(dataset), columns * rows)
    if n == 0:
        raise DataError("cannot preview an empty dataset")
    h, w = dataset.height, dataset.width
    grid_rows = -(-n // columns)
    sheet = np.zeros((grid_rows * h, min(n, columns) * w), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, columns)
        sheet[r * h:(r + 1) * h, c * w:(c + 1) * w] = np.rint(dataset.images[i] * 255.0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sheet).save(path)
    return path


# --- Splits ---

def kfold_split(count: int, folds: int, seed: int) -> np.ndarray:
    """Fold id per sample; a seeded shuffle dealt round-robin, so sizes differ by at most one."""
    if folds < 2 or count < folds:
        raise DataError(f"need folds >= 2 and at least one sample per fold, got {count} samples, {folds} folds")
    perm = np.random.default_rng(seed).permutation(count)
    fold_of = np.empty(count, dtype=np.int64)
    fold_of[perm] = np.arange(count) % folds
    return fold_of


def fold_indices(fold_of: Sequence[int], fold: int) -> Tuple[np.ndarray, np.ndarray]:
    """(train, validation) index arrays holding out one fold."""
    fold_of = np.asarray(fold_of)
    if fold not in set(fold_of.tolist()):
        raise DataError(f"fold {fold} is empty")
    return np.flatnonzero(fold_of != fold), np.flatnonzero(fold_of == fold)


# --- Metrics ---

def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(random positive outscores random negative), ties counted one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ShapeMismatch(f"{s.size} scores for {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("auroc expects 0/1 labels")
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"auroc needs both classes, got {n_pos} positive and {n_neg} negative")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def macro_auroc(logits: np.ndarray, labels: Sequence[int]) -> float:
    """Binary AUROC on the class-1 probability, or the mean one-vs-rest AUROC over present classes."""
    probs = softmax(np.asarray(logits, dtype=np.float64))
    y = np.asarray(labels)
    if probs.shape[1] == 2:
        return auroc(probs[:, 1], y)
    values: List[float] = []
    for c in range(probs.shape[1]):
        positives = y == c
        if positives.any() and not positives.all():
            values.append(auroc(probs[:, c], positives.astype(np.int64)))
    if not values:
        raise DegenerateLabels("every class is absent or alone in the labels")
    return float(np.mean(values))


def accuracy(logits: np.ndarray, labels: Sequence[int]) -> float:
    y = np.asarray(labels)
    if len(y) == 0:
        raise DataError("accuracy of an empty batch")
    return float(np.mean(np.argmax(logits, axis=-1) == y))
