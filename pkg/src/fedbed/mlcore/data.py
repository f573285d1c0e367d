"""Datasets, holdout splitting, preprocessing, and batch iteration.

Tabular data comes from CSV with a header row; image data from a folder of
``<subject>/image.pgm`` + ``<subject>/mask.pgm`` pairs (8-bit grayscale,
masks thresholded at 128, intensities min-max normalized per subject).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from ..errors import (
    DatasetTooSmall,
    DomainError,
    ParseError,
    PathNotFound,
    ShapeMismatch,
    UnknownColumn,
)
from ..protocol import PreprocessingStep


@dataclass(frozen=True)
class TabularDataset:
    column_names: tuple
    rows: np.ndarray  # [n, len(column_names)] float64
    target_column: str

    def __post_init__(self):
        object.__setattr__(self, "column_names", tuple(self.column_names))
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != len(self.column_names):
            raise ShapeMismatch("rows must be [n, n_columns]")
        if self.target_column not in self.column_names:
            raise UnknownColumn(f"target column {self.target_column!r} missing")
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return self.rows.shape[0]

    def take(self, indices: Sequence[int]) -> "TabularDataset":
        return TabularDataset(self.column_names, self.rows[np.asarray(indices)],
                              self.target_column)

    def features_and_target(self) -> tuple:
        t_idx = self.column_names.index(self.target_column)
        feature_idx = [i for i in range(len(self.column_names)) if i != t_idx]
        return self.rows[:, feature_idx], self.rows[:, t_idx]

    @property
    def feature_names(self) -> tuple:
        return tuple(c for c in self.column_names if c != self.target_column)


@dataclass(frozen=True)
class FolderImageDataset:
    root_path: str
    subject_ids: tuple
    images: np.ndarray  # [n, h, w] float64 in [0, 1]
    masks: np.ndarray   # [n, h, w] {0, 1}

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        masks = np.asarray(self.masks)
        if images.shape != masks.shape or images.ndim != 3:
            raise ShapeMismatch("images and masks must share [n, h, w] shape")
        if not np.all(np.isin(masks, (0, 1))):
            raise DomainError("mask values must be 0 or 1")
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids))
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "masks", masks.astype(np.int8))

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, indices: Sequence[int]) -> "FolderImageDataset":
        idx = np.asarray(indices)
        return FolderImageDataset(self.root_path,
                                  tuple(self.subject_ids[i] for i in idx),
                                  self.images[idx], self.masks[idx])

    def features_and_target(self) -> tuple:
        n = len(self)
        return (self.images.reshape(n, -1),
                self.masks.reshape(n, -1).astype(np.float64))


# --- loading -----------------------------------------------------------------

def read_csv_table(path) -> tuple:
    """Raw CSV as (column names, list of string rows)."""
    path = Path(path)
    if not path.is_file():
        raise PathNotFound(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty CSV") from None
        header = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} "
                                 f"fields, got {len(row)}")
            rows.append([cell.strip() for cell in row])
    if len(set(header)) != len(header):
        raise ParseError(f"{path}: duplicate column names")
    return header, rows


def table_to_tabular(columns: Sequence[str], rows: Sequence[Sequence[str]],
                     target_column: str) -> TabularDataset:
    """Convert an all-string table to numbers; a non-numeric cell is a
    ParseError (attach a value map in the loading plan for coded columns)."""
    if target_column not in columns:
        raise UnknownColumn(f"target column {target_column!r} not in {columns}")
    numeric = np.empty((len(rows), len(columns)), dtype=np.float64)
    for i, row in enumerate(rows):
        for j, cell in enumerate(row):
            try:
                numeric[i, j] = float(cell)
            except ValueError:
                raise ParseError(
                    f"column {columns[j]!r}, row {i + 1}: "
                    f"non-numeric value {cell!r}") from None
    return TabularDataset(tuple(columns), numeric, target_column)


def load_folder_image_dataset(root) -> FolderImageDataset:
    root = Path(root)
    if not root.is_dir():
        raise PathNotFound(f"no such directory: {root}")
    subjects = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not subjects:
        raise ParseError(f"{root}: no subject directories")
    images, masks = [], []
    shape = None
    for subject in subjects:
        img_path = root / subject / "image.pgm"
        mask_path = root / subject / "mask.pgm"
        for p in (img_path, mask_path):
            if not p.is_file():
                raise PathNotFound(f"missing {p}")
        img = np.asarray(Image.open(img_path).convert("L"), dtype=np.float64)
        mask = np.asarray(Image.open(mask_path).convert("L"))
        if img.shape != mask.shape:
            raise ShapeMismatch(f"{subject}: image {img.shape} vs mask {mask.shape}")
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ShapeMismatch(f"{subject}: shape {img.shape} != {shape}")
        lo, hi = img.min(), img.max()
        images.append((img - lo) / (hi - lo) if hi > lo else np.zeros_like(img))
        masks.append((mask >= 128).astype(np.int8))
    return FolderImageDataset(str(root), tuple(subjects),
                              np.stack(images), np.stack(masks))


# --- holdout split -----------------------------------------------------------

def split_holdout(dataset, holdout_fraction: float, seed: int) -> tuple:
    """Deterministic disjoint (train, holdout) split.

    Holdout size is round(fraction * n), at least 1 and at most n - 1.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise DomainError("holdout_fraction must be in (0, 1)")
    n = len(dataset)
    if n < 2:
        raise DatasetTooSmall(f"need at least 2 samples, got {n}")
    n_holdout = int(round(holdout_fraction * n))
    n_holdout = max(1, min(n - 1, n_holdout))
    perm = np.random.default_rng(seed).permutation(n)
    holdout_idx = np.sort(perm[:n_holdout])
    train_idx = np.sort(perm[n_holdout:])
    return dataset.take(train_idx), dataset.take(holdout_idx)


# --- preprocessing -----------------------------------------------------------

def apply_preprocessing(dataset: TabularDataset,
                        steps: Sequence[PreprocessingStep]) -> TabularDataset:
    """Apply plan preprocessing in order. Feature columns only; the target
    column is never transformed and always survives selection."""
    if not steps:
        return dataset
    if not isinstance(dataset, TabularDataset):
        if any(s.kind != "minmax_columns" for s in steps):
            raise UnknownColumn("image datasets support no column preprocessing")
        return dataset
    current = dataset
    for step in steps:
        if step.kind == "select_columns":
            missing = [c for c in step.names if c not in current.column_names]
            if missing:
                raise UnknownColumn(f"select_columns: unknown columns {missing}")
            keep = [c for c in current.column_names
                    if c in step.names or c == current.target_column]
            idx = [current.column_names.index(c) for c in keep]
            current = TabularDataset(tuple(keep), current.rows[:, idx],
                                     current.target_column)
            continue
        features, target = current.features_and_target()
        if step.kind == "standardize_columns":
            mean = features.mean(axis=0)
            std = features.std(axis=0)
            std = np.where(std > 0, std, 1.0)
            features = (features - mean) / std
        elif step.kind == "minmax_columns":
            lo = features.min(axis=0)
            hi = features.max(axis=0)
            span = np.where(hi > lo, hi - lo, 1.0)
            features = (features - lo) / span
        current = _rebuild(current, features, target)
    return current


def _rebuild(dataset: TabularDataset, features: np.ndarray,
             target: np.ndarray) -> TabularDataset:
    rows = np.empty((features.shape[0], len(dataset.column_names)))
    t_idx = dataset.column_names.index(dataset.target_column)
    f = 0
    for j in range(len(dataset.column_names)):
        if j == t_idx:
            rows[:, j] = target
        else:
            rows[:, j] = features[:, f]
            f += 1
    return TabularDataset(dataset.column_names, rows, dataset.target_column)


# --- batch iteration ---------------------------------------------------------

def iterate_batches(n: int, batch_size: int, num_updates: int,
                    seed: int) -> Iterator[np.ndarray]:
    """Yield ``num_updates`` index batches, shuffling each epoch from the
    given seed; the final batch of an epoch may be short."""
    if n < 1 or batch_size < 1 or num_updates < 1:
        raise DomainError("n, batch_size, num_updates must be positive")
    rng = np.random.default_rng(seed)
    emitted = 0
    while emitted < num_updates:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            if emitted >= num_updates:
                return
            yield perm[start:start + batch_size]
            emitted += 1
