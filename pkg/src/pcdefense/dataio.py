"""MNIST IDX / CIFAR-10 binary parsing, batching, and fixture writers.

Pixels are kept on the raw [0,1] scale (value/255, nothing else): attack
budgets and purified-image clipping are defined on that scale.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ParseError, ValidationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixels, channel-major


@dataclass
class Dataset:
    """Images (N,C,H,W) in [0,1] with integer labels in 0..k-1."""

    name: str
    images: np.ndarray
    labels: np.ndarray
    k: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    def validate(self):
        if self.images.ndim != 4:
            raise ValidationError(f"images must be (N,C,H,W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError(
                f"image count {self.images.shape[0]} != label count {self.labels.shape[0]}"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValidationError("pixels outside [0,1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValidationError(f"label >= k ({self.k})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.images.shape[1:]))


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, n: int, path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError(f"{path}: truncated file while reading {what}")
    return buf


def load_mnist(images_path, labels_path, name: str = "mnist") -> Dataset:
    """Parse an IDX image/label file pair into a (N,1,28,28) dataset."""
    with _open_maybe_gzip(images_path) as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path, "header"))
        if magic != IDX_IMAGES_MAGIC:
            raise ParseError(f"{images_path}: bad magic 0x{magic:08x} (want 0x{IDX_IMAGES_MAGIC:08x})")
        raw = _read_exact(fh, n * rows * cols, images_path, "pixels")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)

    with _open_maybe_gzip(labels_path) as fh:
        magic, n_lab = struct.unpack(">II", _read_exact(fh, 8, labels_path, "header"))
        if magic != IDX_LABELS_MAGIC:
            raise ParseError(f"{labels_path}: bad magic 0x{magic:08x} (want 0x{IDX_LABELS_MAGIC:08x})")
        labels = np.frombuffer(_read_exact(fh, n_lab, labels_path, "labels"), dtype=np.uint8)

    if n != n_lab:
        raise ParseError(f"image count {n} != label count {n_lab}")
    return Dataset(name=name, images=images / 255.0, labels=labels.astype(np.int64))


def load_cifar10(batch_paths: Sequence, name: str = "cifar10") -> Dataset:
    """Parse CIFAR-10 binary batches (3073-byte records) into (N,3,32,32)."""
    chunks, labels = [], []
    for path in batch_paths:
        with _open_maybe_gzip(path) as fh:
            raw = fh.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise ParseError(
                f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}"
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(rec[:, 0].astype(np.int64))
        chunks.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    labels = np.concatenate(labels)
    if labels.size and labels.max() >= 10:
        raise ValidationError(f"label {labels.max()} >= k (10)")
    return Dataset(name=name, images=np.concatenate(chunks) / 255.0, labels=labels)


# --- fixture writers (same binary layouts, used by tests and round-trips) ---


def write_idx_images(path, images_u8: np.ndarray):
    """Write (N,H,W) uint8 pixels in IDX image format."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images_u8.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def write_cifar10(path, images_u8: np.ndarray, labels):
    """Write (N,3,32,32) uint8 pixels + labels as CIFAR-10 binary records."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    rec = np.empty((images_u8.shape[0], CIFAR_RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images_u8.reshape(images_u8.shape[0], -1)
    Path(path).write_bytes(rec.tobytes())


def dataset_to_idx(ds: Dataset, images_path, labels_path):
    """Serialize an MNIST-shaped dataset back to IDX (exact /255 round-trip)."""
    pix = np.rint(ds.images[:, 0] * 255.0).astype(np.uint8)
    write_idx_images(images_path, pix)
    write_idx_labels(labels_path, ds.labels)


# --- batching / subsetting -------------------------------------------------


def batches(ds: Dataset, batch_size: int, seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle, then contiguous slices; the final short batch is kept."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = perm[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def subset(ds: Dataset, count_or_fraction, seed: int) -> Dataset:
    """Seeded uniform sample without replacement."""
    n = len(ds)
    if isinstance(count_or_fraction, float) and count_or_fraction <= 1.0:
        count = int(round(count_or_fraction * n))
    else:
        count = int(count_or_fraction)
    if count > n:
        raise ValidationError(f"requested {count} > dataset size {n}")
    idx = np.random.default_rng(seed).choice(n, size=count, replace=False)
    return Dataset(name=ds.name, images=ds.images[idx], labels=ds.labels[idx], k=ds.k)
