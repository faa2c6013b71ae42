"""Datasets: seeded synthetic images, CIFAR-10 binary records, augmentation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import DatasetError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
SPLITS = ("train", "test", "validation")

PathLike = Union[str, os.PathLike]


@dataclass
class Dataset:
    images: np.ndarray  # (S, C, H, W) in [0, 1]
    labels: np.ndarray  # (S,) int
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (S, C, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetError(f"{len(self.labels)} labels for {len(self.images)} images")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.images.astype(dtype), self.labels, self.num_classes, self.split)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _class_templates(num_classes: int, channels: int, image_size: int, grid: int,
                     rng: np.random.Generator) -> np.ndarray:
    cell = image_size // grid
    ncells = grid * grid
    per_class = max(1, ncells // 4)
    templates = np.zeros((num_classes, channels, image_size, image_size))
    used: set = set()
    for c in range(num_classes):
        for _ in range(1000):
            cells = tuple(sorted(rng.choice(ncells, size=per_class, replace=False).tolist()))
            if cells not in used:
                break
        used.add(cells)
        for cid in cells:
            r, q = divmod(cid, grid)
            patch = rng.integers(0, 2, size=(channels, cell, cell)).astype(float)
            if not patch.any():
                patch[:, cell // 2, cell // 2] = 1.0
            templates[c, :, r * cell:(r + 1) * cell, q * cell:(q + 1) * cell] = patch
    return templates


def gen_synthetic(num_classes: int, samples_per_class: Union[int, Sequence[int]], image_size: int,
                  noise_std: float, seed: int, channels: int = 3, grid: int = 4,
                  split: str = "train", dtype=np.float64) -> Dataset:
    """Class templates (random binary patches on class-specific grid cells) plus clamped Gaussian noise.

    ``samples_per_class`` may be a per-class list to build an imbalanced set.
    Samples are ordered class by class.
    """
    if image_size < 8 or image_size % grid:
        raise DatasetError(f"image_size must be >= 8 and divisible by grid={grid}")
    if noise_std < 0:
        raise DatasetError("noise_std must be >= 0")
    if num_classes < 1 or channels < 1:
        raise DatasetError("num_classes and channels must be positive")
    counts = ([int(samples_per_class)] * num_classes if np.isscalar(samples_per_class)
              else [int(n) for n in samples_per_class])
    if len(counts) != num_classes or min(counts) < 0:
        raise DatasetError("samples_per_class must be non-negative, one entry per class")

    rng = np.random.default_rng(seed)
    templates = _class_templates(num_classes, channels, image_size, grid, rng)
    labels = np.repeat(np.arange(num_classes), counts)
    images = templates[labels]
    if noise_std > 0:
        images = images + rng.normal(0.0, noise_std, size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(dtype)
    return Dataset(images, labels, num_classes, split)


def synthetic_templates(num_classes: int, image_size: int, seed: int, channels: int = 3, grid: int = 4) -> np.ndarray:
    """The noise-free class templates used by :func:`gen_synthetic` for ``seed``."""
    rng = np.random.default_rng(seed)
    return _class_templates(num_classes, channels, image_size, grid, rng)


# CIFAR-10 binary layout -------------------------------------------------------------------


def load_cifar10_binary(paths: Iterable[PathLike], split: str = "train", limit: Optional[int] = None,
                        dtype=np.float64) -> Dataset:
    """Parse CIFAR-10 binary batches: per record 1 label byte + 3072 pixel bytes (R, G, B planes).

    ``limit`` keeps only the first ``limit`` records of each file.
    """
    paths = list(paths)
    if not paths:
        raise DatasetError("no CIFAR-10 files given")
    images, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        full = len(raw) // CIFAR_RECORD
        if len(raw) % CIFAR_RECORD:
            raise DatasetError(f"{path}: truncated record at byte offset {full * CIFAR_RECORD}")
        n = full if limit is None else min(full, limit)
        rec = np.frombuffer(raw, dtype=np.uint8, count=n * CIFAR_RECORD).reshape(n, CIFAR_RECORD)
        bad = np.nonzero(rec[:, 0] > 9)[0]
        if bad.size:
            raise DatasetError(f"{path}: label {rec[bad[0], 0]} > 9 at byte offset {bad[0] * CIFAR_RECORD}")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(n, *CIFAR_SHAPE))
    pixels = np.concatenate(images)
    if len(pixels) == 0:
        raise DatasetError("CIFAR-10 files contain no records")
    return Dataset(pixels.astype(dtype) / 255.0, np.concatenate(labels), 10, split)


def _to_bytes(images: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_records(dataset: Dataset, path: PathLike) -> None:
    """Write label byte + uint8 pixel planes per sample (the CIFAR-10 record layout)."""
    if dataset.num_classes > 256:
        raise DatasetError("labels must fit in one byte")
    n = len(dataset)
    body = _to_bytes(dataset.images).reshape(n, -1)
    out = np.concatenate([dataset.labels.astype(np.uint8)[:, None], body], axis=1)
    Path(path).write_bytes(out.tobytes())


def write_cifar10_binary(dataset: Dataset, path: PathLike) -> None:
    if dataset.sample_shape != CIFAR_SHAPE:
        raise DatasetError(f"CIFAR-10 records hold {CIFAR_SHAPE} images, got {dataset.sample_shape}")
    write_records(dataset, path)


def export_synthetic(dataset: Dataset, path: PathLike, seed: int) -> None:
    """Record file plus ``<path>.json`` sidecar describing its geometry."""
    c, h, w = dataset.sample_shape
    if h != w:
        raise DatasetError("synthetic images are square")
    write_records(dataset, path)
    meta = {"num_classes": dataset.num_classes, "image_size": h, "channels": c,
            "seed": seed, "count": len(dataset), "split": dataset.split}
    Path(f"{path}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def import_synthetic(path: PathLike, dtype=np.float64) -> Dataset:
    meta_path = Path(f"{path}.json")
    if not meta_path.exists():
        raise DatasetError(f"missing sidecar {meta_path}")
    meta = json.loads(meta_path.read_text())
    c, s = int(meta["channels"]), int(meta["image_size"])
    rec_len = 1 + c * s * s
    raw = Path(path).read_bytes()
    if len(raw) % rec_len:
        raise DatasetError(f"{path}: truncated record at byte offset {(len(raw) // rec_len) * rec_len}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec_len)
    images = rec[:, 1:].reshape(-1, c, s, s).astype(dtype) / 255.0
    return Dataset(images, rec[:, 0].astype(np.int64), int(meta["num_classes"]), meta.get("split", "train"))


# augmentation -----------------------------------------------------------------------------


def augment(image: np.ndarray, rng: np.random.Generator, crop_padding: int = 4,
            max_rotation: float = 15.0) -> np.ndarray:
    """Random zero-padded crop then a random rotation (bilinear, zero fill), clamped to [0, 1]."""
    if crop_padding < 0:
        raise ValueError("crop_padding must be >= 0")
    if not 0 <= max_rotation <= 180:
        raise ValueError("max_rotation must lie in [0, 180]")
    img = np.asarray(image)
    _, h, w = img.shape
    out = img
    if crop_padding:
        p = crop_padding
        padded = np.pad(img, ((0, 0), (p, p), (p, p)))
        top, left = rng.integers(0, 2 * p + 1, size=2)
        out = padded[:, top:top + h, left:left + w]
    if max_rotation:
        angle = rng.uniform(-max_rotation, max_rotation)
        out = ndimage.rotate(out, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def augment_batch(images: np.ndarray, rng: np.random.Generator, crop_padding: int = 4,
                  max_rotation: float = 15.0) -> np.ndarray:
    return np.stack([augment(im, rng, crop_padding, max_rotation) for im in images])
