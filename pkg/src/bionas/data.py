"""Datasets: CIFAR-10 binary batches and deterministic synthetic stripe images."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import RngStream, default_dtype

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class DataError(ValueError):
    """Malformed or inconsistent dataset input (CLI exit code 3)."""


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    mean: tuple = ()
    std: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} do not match {len(self.labels)} labels")
        if len(self.labels) and self.labels.min() < 0:
            raise DataError("negative label")
        if not self.mean and len(self.labels):
            self.mean = tuple(float(m) for m in self.images.mean(axis=(0, 2, 3)))
            self.std = tuple(float(s) for s in self.images.std(axis=(0, 2, 3)))

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def normalized(self) -> np.ndarray:
        if not len(self):
            return self.images
        m = np.asarray(self.mean, dtype=self.images.dtype).reshape(1, -1, 1, 1)
        s = np.asarray(self.std, dtype=self.images.dtype).reshape(1, -1, 1, 1)
        return (self.images - m) / np.where(s > 0, s, 1.0)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.mean, self.std, dict(self.meta))

    def split(self, fraction: float, rng: RngStream | None = None):
        """Two disjoint parts; the first holds round(fraction * N) samples."""
        if not 0.0 < fraction < 1.0:
            raise ValueError("split fraction must be in (0, 1)")
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        k = int(round(fraction * len(self)))
        return self.subset(order[:k]), self.subset(order[k:])


def load_cifar10_bin(paths, num_classes: int = 10) -> Dataset:
    """Decode one or more CIFAR-10 binary batch files (label byte + 3072 CHW pixel bytes)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        whole = len(raw) - len(raw) % CIFAR_RECORD
        if whole != len(raw):
            raise DataError(f"{path}: truncated record at byte offset {whole} "
                            f"(file size {len(raw)} is not a multiple of {CIFAR_RECORD})")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(rec[:, 0] >= num_classes)
        if bad.size:
            i = int(bad[0])
            raise DataError(f"{path}: label {rec[i, 0]} > {num_classes - 1} at byte offset {i * CIFAR_RECORD}")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE))
    pix = np.concatenate(images) if images else np.zeros((0, 3, CIFAR_SIDE, CIFAR_SIDE), np.uint8)
    lab = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    x = pix.astype(default_dtype()) / 255.0
    return Dataset(x, lab, CIFAR_MEAN, CIFAR_STD, {"source": [str(p) for p in paths]})


def write_cifar10_bin(path, images_u8: np.ndarray, labels) -> None:
    """Inverse of the loader for uint8 [N, 3, 32, 32] pixels."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    rec = np.concatenate([labels, images_u8.reshape(len(labels), -1)], axis=1)
    Path(path).write_bytes(rec.tobytes())


def _stripes(side: int, freq: float, theta: float, phase: float = 0.0) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(float) / side
    return np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)


def gen_synthetic(classes: int, per_class: int, side: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Class c is a stripe grating of frequency c+1 at orientation pi*c/classes.

    Each sample scales its class pattern by a random contrast in [0.5, 1] and
    adds Gaussian pixel noise; pixels are clipped to [0, 1].
    """
    if side < 4:
        raise ValueError("side must be >= 4")
    if classes < 1 or per_class < 0:
        raise ValueError("need classes >= 1 and per_class >= 0")
    rng = RngStream(seed, (8, 0))
    gains = np.array([1.0, 0.8, 0.6]).reshape(3, 1, 1)
    xs, ys = [], []
    for c in range(classes):
        base = _stripes(side, c + 1, np.pi * c / classes)
        contrast = rng.uniform(0.5, 1.0, size=per_class).reshape(-1, 1, 1, 1)
        img = 0.5 + 0.5 * contrast * gains[None] * base[None, None]
        if noise:
            img = img + noise * rng.normal(size=img.shape)
        xs.append(np.clip(img, 0.0, 1.0))
        ys.append(np.full(per_class, c))
    x = np.concatenate(xs).astype(default_dtype())
    y = np.concatenate(ys)
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order], meta={"generator": "stripes", "classes": classes, "side": side,
                                             "noise": noise, "seed": seed})


def gen_orientation_task(n: int, side: int = 8, noise: float = 0.1, seed: int = 0, channels: int = 3) -> Dataset:
    """Horizontal (label 0) versus vertical (label 1) gratings with random period and phase.

    The two classes are mirror images under transposition, so any operation
    that commutes with transposition followed by global pooling cannot tell
    them apart, and the per-class pixel mean is flat.
    """
    rng = RngStream(seed, (9, 0))
    labels = rng.integers(0, 2, size=n)
    freq = rng.uniform(1.0, side / 2.5, size=n)
    phase = rng.uniform(0.0, 2 * np.pi, size=n)
    x = np.empty((n, channels, side, side))
    for i in range(n):
        theta = np.pi / 2 if labels[i] else 0.0
        x[i] = 0.5 + 0.4 * _stripes(side, freq[i], theta, phase[i])[None]
    x += noise * rng.normal(size=x.shape)
    return Dataset(x.astype(default_dtype()), labels, meta={"generator": "orientation", "seed": seed})
