"""Dataset ingestion: MNIST IDX, CIFAR-10 binary batches, synthetic blobs."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError, ValidationError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CIFAR10_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR10_STD = np.array([0.2023, 0.1914, 0.2010])
_CIFAR_RECORD = 3073  # label byte + 3 * 32 * 32 pixels


@dataclass
class Dataset:
    """Raw images in [0, 1] with integer labels and optional normalization.

    ``mean``/``std`` are per-channel statistics applied before the network
    sees the data; they stay attached to the dataset so that perturbation
    boxes can be built in raw pixel space and normalized afterwards.
    """

    images: np.ndarray                 # [N, *shape], values in [0, 1]
    labels: np.ndarray                 # [N] int64
    num_classes: int
    mean: np.ndarray | None = None     # per-channel
    std: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValidationError("raw pixel values must lie in [0, 1]")

    def __len__(self):
        return self.images.shape[0]

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """Map raw pixels to network inputs using the attached statistics."""
        if self.mean is None:
            return x
        view = (1, -1) + (1,) * (x.ndim - 2)
        return (x - self.mean.reshape(view)) / self.std.reshape(view)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return x
        view = (1, -1) + (1,) * (x.ndim - 2)
        return x * self.std.reshape(view) + self.mean.reshape(view)

    def subset(self, n: int) -> "Dataset":
        n = min(int(n), len(self))
        return Dataset(self.images[:n], self.labels[:n], self.num_classes,
                       self.mean, self.std, self.name)

    def split(self, n: int) -> tuple["Dataset", "Dataset"]:
        """First n examples and the remainder, as two datasets."""
        n = min(int(n), len(self))
        head = Dataset(self.images[:n], self.labels[:n], self.num_classes,
                       self.mean, self.std, self.name)
        tail = Dataset(self.images[n:], self.labels[n:], self.num_classes,
                       self.mean, self.std, self.name)
        return head, tail


def _open_maybe_gzip(path: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, n: int, path: str, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: truncated while reading {what} "
                          f"({len(data)} of {n} bytes)")
    return data


# Upper bound on a parsed payload; corrupted headers must not drive allocation.
_MAX_IDX_BYTES = 1 << 32


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse a big-endian IDX image/label pair (MNIST container format)."""
    with _open_maybe_gzip(images_path) as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path, "header"))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        if n * rows * cols > _MAX_IDX_BYTES:
            raise FormatError(
                f"{images_path}: header declares {n}x{rows}x{cols} pixels, "
                f"beyond the {_MAX_IDX_BYTES}-byte limit"
            )
        raw = _read_exact(fh, n * rows * cols, images_path, f"{n} images")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    with _open_maybe_gzip(labels_path) as fh:
        magic, nl = struct.unpack(">II", _read_exact(fh, 8, labels_path, "header"))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        labels = np.frombuffer(_read_exact(fh, nl, labels_path, f"{nl} labels"), dtype=np.uint8)
    if n != nl:
        raise ValidationError(f"{n} images but {nl} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64),
                   num_classes=10, name="idx")


def load_mnist(directory: str, split: str = "train") -> Dataset:
    """Load an MNIST-style IDX pair from a directory, preferring .gz files."""
    import os

    prefix = {"train": "train", "test": "t10k"}.get(split)
    if prefix is None:
        raise ContractError(f"split must be train/test, got {split!r}")
    names = (f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte")
    paths = []
    for name in names:
        gz = os.path.join(directory, name + ".gz")
        plain = os.path.join(directory, name)
        if os.path.exists(gz):
            paths.append(gz)
        elif os.path.exists(plain):
            paths.append(plain)
        else:
            raise FileNotFoundError(f"missing {name}[.gz] in {directory}")
    ds = load_idx(paths[0], paths[1])
    ds.name = f"mnist-{split}"
    return ds


def load_cifar10_bin(paths) -> Dataset:
    """Parse CIFAR-10 binary batch files (3073-byte records)."""
    if isinstance(paths, (str, bytes)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        with _open_maybe_gzip(path) as fh:
            raw = fh.read()
        if len(raw) == 0 or len(raw) % _CIFAR_RECORD != 0:
            raise FormatError(
                f"{path}: size {len(raw)} is not a multiple of the "
                f"{_CIFAR_RECORD}-byte record"
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    ds = Dataset(np.concatenate(images), np.concatenate(labels), num_classes=10,
                 mean=CIFAR10_MEAN.copy(), std=CIFAR10_STD.copy(), name="cifar10")
    return ds


def synthetic_blobs(n: int, dims: int, classes: int, seed: int,
                    cluster_std: float = 0.03,
                    min_separation: float | None = None) -> Dataset:
    """Gaussian class clusters clipped to the unit box, deterministic per seed.

    Cluster centers are drawn away from the box boundary with pairwise
    separation of 10 cluster widths (capped so wide clusters stay placeable),
    so small-variance instances are linearly separable.  Labels are assigned
    round-robin (balanced within 1).
    """
    rng = np.random.default_rng(seed)
    min_sep = min(10.0 * cluster_std, 0.45) if min_separation is None else min_separation
    centers = []
    for _ in range(classes):
        for _attempt in range(10000):
            cand = rng.uniform(0.2, 0.8, size=dims)
            if all(np.linalg.norm(cand - c) >= min_sep for c in centers):
                centers.append(cand)
                break
        else:
            raise ContractError(
                f"cannot place {classes} centers with separation {min_sep:.3f} "
                f"in {dims} dimensions; reduce cluster_std"
            )
    centers = np.stack(centers)
    labels = np.arange(n, dtype=np.int64) % classes
    points = centers[labels] + rng.normal(0.0, cluster_std, size=(n, dims))
    points = np.clip(points, 0.0, 1.0)
    perm = rng.permutation(n)
    return Dataset(points[perm], labels[perm], num_classes=classes, name="synthetic")


def augment_flip_crop(images: np.ndarray, rng: np.random.Generator,
                      crop_pad: int = 4) -> np.ndarray:
    """Random horizontal flips and padded random crops for [N,C,H,W] batches.

    Off by default everywhere; desk-scale runs never reach the regime where
    augmentation matters, so this exists for full-scale reproduction only.
    """
    n, c, h, w = images.shape
    out = images[:, :, :, ::-1].copy()
    keep = rng.random(n) < 0.5
    out[keep] = images[keep]
    if crop_pad > 0:
        padded = np.zeros((n, c, h + 2 * crop_pad, w + 2 * crop_pad), dtype=images.dtype)
        padded[:, :, crop_pad : crop_pad + h, crop_pad : crop_pad + w] = out
        offs = rng.integers(0, 2 * crop_pad + 1, size=(n, 2))
        cropped = np.empty_like(out)
        for i in range(n):
            cropped[i] = padded[i, :, offs[i, 0] : offs[i, 0] + h,
                                offs[i, 1] : offs[i, 1] + w]
        out = cropped
    return out


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None,
            epoch: int = 0):
    """Deterministically shuffled (images, labels) batches; final batch kept."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
