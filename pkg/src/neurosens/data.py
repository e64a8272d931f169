"""Dataset ingestion (IDX, CIFAR-10 binary), synthetic datasets and splits."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N] int
    class_count: int
    split: str = "all"

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got shape {list(images.shape)}")
        if labels.shape != (images.shape[0],):
            raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for {images.shape[0]} images")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if images.size and (images.min() < 0.0 or images.max() > 1.0 or not np.all(np.isfinite(images))):
            raise ValueError("pixel values must lie in [0, 1]")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, split or self.split)


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """Parse a big-endian IDX image/label file pair; bytes are scaled by 1/255."""
    ib = Path(images_path).read_bytes()
    lb = Path(labels_path).read_bytes()
    if len(ib) < 16:
        raise DatasetFormatError(f"{images_path}: too short for an IDX image header")
    magic, n, rows, cols = struct.unpack(">IIII", ib[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetFormatError(f"{images_path}: bad IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(ib) != 16 + n * rows * cols:
        raise DatasetFormatError(f"{images_path}: header declares {n}x{rows}x{cols} pixels but payload has {len(ib) - 16} bytes")
    if len(lb) < 8:
        raise DatasetFormatError(f"{labels_path}: too short for an IDX label header")
    lmagic, ln = struct.unpack(">II", lb[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DatasetFormatError(f"{labels_path}: bad IDX label magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(lb) != 8 + ln:
        raise DatasetFormatError(f"{labels_path}: header declares {ln} labels but payload has {len(lb) - 8} bytes")
    if ln != n:
        raise DatasetFormatError(f"label count {ln} does not match image count {n}")
    images = np.frombuffer(ib, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols) / 255.0
    labels = np.frombuffer(lb, dtype=np.uint8, offset=8).astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if n else 1
    return Dataset(images, labels, class_count)


def load_cifar_binary(paths: Sequence | str | Path, class_count: int = 10) -> Dataset:
    """Read CIFAR-10 binary batches: 3073-byte records, label then R, G, B planes."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise DatasetFormatError(f"{p}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        if not raw:
            warnings.warn(f"{p}: empty CIFAR file", stacklevel=2)
            continue
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32) / 255.0)
    if not images:
        return Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=np.int64), class_count)
    return Dataset(np.concatenate(images), np.concatenate(labels), class_count)


def _blob_centers(classes: int, size: int) -> list[tuple[float, float]]:
    cols = int(np.ceil(np.sqrt(classes)))
    rows = int(np.ceil(classes / cols))
    ys = (np.arange(rows) + 0.5) * size / rows
    xs = (np.arange(cols) + 0.5) * size / cols
    return [(ys[i // cols] - 0.5, xs[i % cols] - 0.5) for i in range(classes)]


def synth_dataset(kind: str = "blobs", classes: int = 10, n: int = 1000, size: int = 16,
                  noise: float = 0.1, seed: int = 0, channels: int = 3,
                  amplitude: float = 0.5, background: float = 0.25) -> Dataset:
    """Class-conditional images with a learnable signal plus Gaussian pixel noise.

    ``blobs`` places a Gaussian blob at a class-specific grid position;
    ``stripes`` draws sinusoidal stripes with a class-specific frequency and
    orientation. Classes are balanced (round-robin labels, then shuffled).
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "blobs":
        width = size / (2.5 * np.ceil(np.sqrt(classes)))
        templates = np.stack([
            np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            for cy, cx in _blob_centers(classes, size)
        ])
    elif kind == "stripes":
        templates = []
        for c in range(classes):
            freq = 1 + c // 2
            theta = 0.0 if c % 2 == 0 else np.pi / 2
            phase = (xx * np.cos(theta) + yy * np.sin(theta)) * 2 * np.pi * freq / size
            templates.append(0.5 + 0.5 * np.cos(phase))
        templates = np.stack(templates)
    else:
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    clean = background + amplitude * templates[labels]
    images = np.repeat(clean[:, None], channels, axis=1)
    if noise > 0:
        images = images + rng.normal(0.0, noise, size=images.shape)
    return Dataset(np.clip(images, 0.0, 1.0), labels, classes, "all")


def blobs_large(n: int = 1000, seed: int = 0, noise: float = 0.1) -> Dataset:
    """64x64, 10-class stand-in for the large-image experiments."""
    return synth_dataset("blobs", 10, n, 64, noise, seed)


def split(dataset: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Stratified, disjoint, exhaustive (train, val, test) split."""
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        rng.shuffle(idx)
        n_train = int(round(fr[0] * len(idx)))
        n_val = min(int(round(fr[1] * len(idx))), len(idx) - n_train)
        parts[0] += idx[:n_train].tolist()
        parts[1] += idx[n_train:n_train + n_val].tolist()
        parts[2] += idx[n_train + n_val:].tolist()
    return tuple(dataset.subset(sorted(p), tag) for p, tag in zip(parts, ("train", "val", "test")))
