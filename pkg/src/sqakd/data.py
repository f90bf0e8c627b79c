"""Datasets: CIFAR-style binary records, synthetic Gaussian blobs, batching."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1], or [N, D]
    labels: np.ndarray  # int64 [N]
    class_count: int

    def __post_init__(self):
        if len(self.images) < 1:
            raise DataError("a dataset needs at least one sample")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} samples but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.images, np.asarray(labels, dtype=np.int64), self.class_count)


def load_binary_records(path, shape=(3, 32, 32), class_count: int = 10, label_bytes: int = 1) -> Dataset:
    """Read fixed-size records: label byte(s) then channel-planar uint8 pixels."""
    raw = np.fromfile(Path(path), dtype=np.uint8)
    pixels = int(np.prod(shape))
    rec = label_bytes + pixels
    if raw.size == 0 or raw.size % rec:
        raise DataError(
            f"{path}: {raw.size} bytes is not a positive multiple of the {rec}-byte record size"
        )
    records = raw.reshape(-1, rec)
    # a multi-byte label is read from its last byte (CIFAR-100 stores coarse, fine)
    labels = records[:, label_bytes - 1].astype(np.int64)
    if labels.max() >= class_count:
        bad = int(np.argmax(labels >= class_count))
        raise DataError(f"{path}: record {bad} has label {labels[bad]} >= class_count {class_count}")
    images = records[:, label_bytes:].reshape(-1, *shape).astype(np.float64) / 255.0
    return Dataset(images, labels, class_count)


def write_binary_records(path, ds: Dataset, label_bytes: int = 1) -> None:
    imgs = np.rint(ds.images.reshape(len(ds), -1) * 255.0).astype(np.uint8)
    lab = np.zeros((len(ds), label_bytes), dtype=np.uint8)
    lab[:, -1] = ds.labels
    Path(path).write_bytes(np.concatenate([lab, imgs], axis=1).tobytes())


def blob_centers(classes: int, dim: int, radius: float = 3.0) -> np.ndarray:
    """Class centers evenly spaced on a circle in the first two coordinates."""
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    if dim > 1:
        centers[:, 1] = radius * np.sin(angles)
    return centers


def synth_blobs(n_per_class: int, classes: int, dim: int, spread: float, seed: int) -> Dataset:
    if min(n_per_class, classes, dim) <= 0 or spread < 0:
        raise DataError("synth_blobs arguments must be positive")
    rng = np.random.default_rng(seed)
    centers = blob_centers(classes, dim)
    labels = np.repeat(np.arange(classes), n_per_class)
    points = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    return Dataset(points, labels.astype(np.int64), classes)


def permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle order for one epoch from a Philox counter-based stream keyed on (seed, epoch)."""
    key = (int(epoch) << 64) | (int(seed) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key)).permutation(n)


def batches(ds: Dataset, batch_size: int, shuffle_seed: Optional[int] = None, epoch: int = 0):
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    order = np.arange(len(ds)) if shuffle_seed is None else permutation(len(ds), shuffle_seed, epoch)
    out = []
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        out.append((ds.images[idx], ds.labels[idx]))
    return out


AUGMENT_POLICIES = ("none", "flip_lr", "pad_crop")


def augment(images: np.ndarray, policy: str, rng: np.random.Generator, p: float = 0.5, pad: int = 4):
    if policy not in AUGMENT_POLICIES:
        raise DataError(f"unknown augmentation policy {policy!r}")
    if policy == "none":
        return images
    if images.ndim != 4:
        raise DataError(f"augmentation {policy!r} needs image batches [N,C,H,W], got {images.shape}")
    n, _, h, w = images.shape
    if policy == "flip_lr":
        flip = rng.random(n) < p
        out = images.copy()
        out[flip] = out[flip][..., ::-1]
        return out
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    out = np.empty_like(images)
    for i in range(n):
        out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out
