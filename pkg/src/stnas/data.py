"""Datasets: CIFAR binary ingestion, synthetic blobs, and the balanced proxy subsample."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataFormatError
from .seeding import rng_for

CIFAR_RECORD = 1 + 3 * 32 * 32
# NAS-Bench-201 CIFAR-10 constants (pixel scale 0..1)
CIFAR10_MEAN = (125.3 / 255, 123.0 / 255, 113.9 / 255)
CIFAR10_STD = (63.0 / 255, 62.1 / 255, 66.7 / 255)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    source: dict = field(default_factory=dict)
    mean: tuple = ()
    std: tuple = ()

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise DataFormatError(f"images must be a non-empty NCHW array, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataFormatError("one label per image required")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataFormatError(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return int(self.images.shape[0])

    @property
    def resolution(self) -> int:
        return int(self.images.shape[2])

    @property
    def channels(self) -> int:
        return int(self.images.shape[1])

    @property
    def identity(self) -> str:
        return ",".join(f"{k}={self.source[k]}" for k in sorted(self.source))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        src = dict(self.source, subset=len(index))
        return LabeledDataset(self.images[index], self.labels[index], self.class_count, src, self.mean, self.std)

    def manifest(self) -> dict:
        return {"source": dict(self.source), "n": len(self), "class_count": self.class_count,
                "normalization_mean": list(self.mean), "normalization_std": list(self.std)}


def _read_cifar_file(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise DataFormatError(f"{path}: empty file", offset=0)
    whole = len(raw) // CIFAR_RECORD
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(
            f"{path}: truncated record at byte offset {whole * CIFAR_RECORD} "
            f"({len(raw) % CIFAR_RECORD} of {CIFAR_RECORD} bytes)", offset=whole * CIFAR_RECORD)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(whole, CIFAR_RECORD)
    return rec[:, 0].astype(np.int64), rec[:, 1:].reshape(whole, 3, 32, 32)


def load_cifar_binary(path: str | os.PathLike | Sequence, class_count: int = 10,
                      mean=CIFAR10_MEAN, std=CIFAR10_STD) -> LabeledDataset:
    """Load one or more CIFAR binary batch files (1 label byte + 3072 RGB bytes per record).

    Pixels are scaled to [0, 1] and standardized per channel with ``mean``/``std``.
    """
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path)
    labels, images = [], []
    for p in paths:
        lab, img = _read_cifar_file(p)
        bad = np.flatnonzero(lab >= class_count)
        if bad.size:
            raise DataFormatError(f"{p}: label {lab[bad[0]]} >= class_count {class_count} "
                                  f"at byte offset {bad[0] * CIFAR_RECORD}", offset=int(bad[0] * CIFAR_RECORD))
        labels.append(lab)
        images.append(img)
    img = np.concatenate(images).astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)
    img = (img - m) / s
    source = {"kind": "cifar_binary", "path": ";".join(str(p) for p in paths)}
    return LabeledDataset(img, np.concatenate(labels), class_count, source, tuple(mean), tuple(std))


def synth_dataset(classes: int = 10, per_class: int = 100, resolution: int = 32, seed: int = 0,
                  channels: int = 3, noise: float = 2.0, blobs: int = 3) -> LabeledDataset:
    """Class-conditional Gaussian-blob images.

    Each class owns a mean image made of ``blobs`` isotropic Gaussian bumps with
    random centre, width and signed per-channel amplitude; samples add i.i.d.
    pixel noise. The result is standardized per channel and the constants kept.
    """
    rng = rng_for(seed, "synth", classes, per_class, resolution)
    yy, xx = np.mgrid[0:resolution, 0:resolution] / max(resolution - 1, 1)
    means = np.zeros((classes, channels, resolution, resolution))
    for k in range(classes):
        for _ in range(blobs):
            cy, cx = rng.uniform(0.1, 0.9, size=2)
            width = rng.uniform(0.1, 0.3)
            amp = rng.uniform(-2.0, 2.0, size=channels)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            means[k] += amp[:, None, None] * bump
    labels = np.repeat(np.arange(classes), per_class)
    images = means[labels] + noise * rng.standard_normal((labels.size, channels, resolution, resolution))
    order = rng.permutation(labels.size)
    images, labels = images[order], labels[order]
    mu = images.mean(axis=(0, 2, 3))
    sd = images.std(axis=(0, 2, 3))
    images = ((images - mu[None, :, None, None]) / sd[None, :, None, None]).astype(np.float32)
    source = {"kind": "synthetic", "classes": classes, "per_class": per_class, "resolution": resolution,
              "seed": seed, "channels": channels, "noise": noise, "blobs": blobs}
    return LabeledDataset(images, labels.astype(np.int64), classes, source,
                          tuple(float(v) for v in mu), tuple(float(v) for v in sd))


@dataclass(frozen=True, eq=False)
class ProxyDataset:
    """Balanced subsample relabeled to 0..k-1 in the order the classes were drawn."""

    parent: str
    class_ids: tuple[int, ...]
    per_class: int
    images: np.ndarray
    labels: np.ndarray
    seed: int

    @property
    def k(self) -> int:
        return len(self.class_ids)

    def __len__(self):
        return int(self.images.shape[0])

    def manifest(self) -> dict:
        return {"parent": self.parent, "class_ids": list(self.class_ids), "per_class": self.per_class,
                "seed": self.seed, "n": len(self)}


def sample_proxy(dataset: LabeledDataset, k_classes: int = 10, per_class: int | None = 10,
                 seed: int = 0) -> ProxyDataset:
    """Draw ``k_classes`` classes, then ``per_class`` images from each, all without replacement.

    ``per_class=None`` takes every image of the smallest chosen class.
    """
    if not 1 <= k_classes <= dataset.class_count:
        raise ValueError(f"k_classes={k_classes} outside 1..{dataset.class_count}")
    rng = rng_for(seed, "proxy", k_classes, per_class)
    counts = dataset.class_counts()
    classes = rng.choice(dataset.class_count, size=k_classes, replace=False)
    take = int(counts[classes].min()) if per_class is None else per_class
    if take < 1:
        raise ValueError("per_class must be >= 1")
    idx, labels = [], []
    for new, c in enumerate(classes):
        pool = np.flatnonzero(dataset.labels == c)
        if pool.size < take:
            raise ValueError(f"class {c} has {pool.size} images; proxy needs {take}")
        idx.append(rng.choice(pool, size=take, replace=False))
        labels.append(np.full(take, new, dtype=np.int64))
    idx = np.concatenate(idx)
    return ProxyDataset(dataset.identity, tuple(int(c) for c in classes), take,
                        dataset.images[idx], np.concatenate(labels), seed)
