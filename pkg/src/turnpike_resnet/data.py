"""Datasets: two spirals, MNIST IDX files, and the stacked ensemble view."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .softce import check_labels

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (D, n)
    labels: np.ndarray    # (D,), values in 1..C
    num_classes: int

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError(f"features must be a non-empty D x n array, got shape {X.shape}")
        if X.shape[1] < self.num_classes:
            raise ValueError(
                f"state dimension {X.shape[1]} smaller than number of classes {self.num_classes}")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        y = check_labels(self.labels, self.num_classes)
        if y.shape != (X.shape[0],):
            raise ValueError(f"{y.shape[0] if y.ndim else 0} labels for {X.shape[0]} samples")
        X.flags.writeable = False
        y = y.copy()
        y.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_slice_dim(self) -> int:
        return self.num_classes

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


def two_spirals(n_per_class=240, noise_std=0.02, turns=1.5, seed=0,
                r_max=1.0, theta0=0.0) -> Dataset:
    """Two intertwined spirals; class 2 is class 1 rotated by pi.

    With ``t`` equally spaced in (0, 1], class-1 points sit at radius
    ``r_max * t`` and angle ``theta0 + 2 pi turns t``.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    t = np.arange(1, n_per_class + 1) / n_per_class
    theta = theta0 + 2.0 * np.pi * turns * t
    arm = np.column_stack([r_max * t * np.cos(theta), r_max * t * np.sin(theta)])
    X = np.vstack([arm, -arm])
    if noise_std > 0:
        X = X + np.random.default_rng(seed).normal(0.0, noise_std, size=X.shape)
    y = np.repeat([1, 2], n_per_class)
    return Dataset(X, y, 2)


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(path, magic, ndim):
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: file too short for IDX header ({len(raw)} bytes)")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxTruncatedError(
            f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return dims, np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    _, images = _parse_idx(path, IMAGES_MAGIC, 3)
    return images


def read_idx_labels(path) -> np.ndarray:
    _, labels = _parse_idx(path, LABELS_MAGIC, 1)
    return labels


def load_mnist_idx(images_path, labels_path, limit=None) -> Dataset:
    """Load MNIST: flattened pixels scaled to [0, 1], digits 0..9 as classes 1..10."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatch(
            f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}")
    if np.any(labels > 9):
        raise IdxError(f"{labels_path}: label values outside 0..9")
    if limit is not None:
        if limit < 1:
            raise ValueError("limit must be >= 1")
        images, labels = images[:limit], labels[:limit]
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64) + 1, 10)


def idx_images_bytes(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    return struct.pack(">4I", IMAGES_MAGIC, *images.shape) + images.tobytes()


def idx_labels_bytes(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">2I", LABELS_MAGIC, labels.shape[0]) + labels.tobytes()


def mnist_to_idx_bytes(dataset: Dataset, side=28):
    """Inverse of :func:`load_mnist_idx`: ``(images_bytes, labels_bytes)``."""
    pixels = np.rint(dataset.features * 255.0).astype(np.uint8)
    images = pixels.reshape(dataset.size, side, -1)
    return idx_images_bytes(images), idx_labels_bytes(dataset.labels - 1)


def stack(dataset: Dataset):
    """Stacked feature vector (sample order) and label vector."""
    return dataset.features.reshape(-1).copy(), dataset.labels.copy()


def unstack(stacked, labels, num_classes) -> Dataset:
    labels = np.asarray(labels)
    return Dataset(np.asarray(stacked).reshape(labels.shape[0], -1), labels, num_classes)


def write_csv(path, dataset: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(dataset.dim)] + ["label"])
        for x, y in zip(dataset.features.tolist(), dataset.labels.tolist()):
            w.writerow([repr(v) for v in x] + [y])


def read_csv(path, num_classes) -> Dataset:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Dataset(data[:, :-1], data[:, -1].astype(np.int64), num_classes)
