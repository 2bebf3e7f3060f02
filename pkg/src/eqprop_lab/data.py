"""Dataset ingestion: IDX-format image/label files, a small binary CIFAR-10
subset loader for smoke tests, and the offline 8x8 digits set used when no
downloaded data is available."""

from __future__ import annotations

import os
import struct
from typing import Optional, Tuple

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file; the message carries the failing byte offset."""


def _read_exact(f, n: int, offset: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"truncated {what} at byte offset "
                             f"{offset + len(buf)}: wanted {n} bytes, got "
                             f"{len(buf)}")
    return buf


def load_mnist_idx(images_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    """Parse big-endian IDX image/label pairs into ([n, 784] floats in [0,1],
    [n] integer labels). Image and label counts must match."""
    with open(images_path, "rb") as f:
        header = _read_exact(f, 16, 0, "image header")
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGES_MAGIC:
            raise IdxFormatError(f"bad image magic 0x{magic:08x} at byte "
                                 f"offset 0 (expected 0x{IMAGES_MAGIC:08x})")
        raw = _read_exact(f, n * rows * cols, 16, "image data")
    images = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    images = images.reshape(n, rows * cols)
    with open(labels_path, "rb") as f:
        header = _read_exact(f, 8, 0, "label header")
        magic, n_labels = struct.unpack(">II", header)
        if magic != LABELS_MAGIC:
            raise IdxFormatError(f"bad label magic 0x{magic:08x} at byte "
                                 f"offset 0 (expected 0x{LABELS_MAGIC:08x})")
        raw = _read_exact(f, n_labels, 8, "label data")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n_labels != n:
        raise IdxFormatError(f"count mismatch: {n} images vs {n_labels} "
                             f"labels")
    return images, labels


def load_cifar10_subset(path, n: int = 1000) -> Tuple[np.ndarray, np.ndarray]:
    """Read the first n records of a CIFAR-10 binary batch file
    (1 label byte + 3072 channel-major pixel bytes per record) into
    ([n, 3, 32, 32] floats in [0,1], [n] labels)."""
    record = 1 + 3072
    size = os.path.getsize(path)
    available = size // record
    if size % record:
        raise ValueError(f"file size {size} is not a whole number of "
                         f"{record}-byte records")
    if available < n:
        raise ValueError(f"requested {n} records, file has {available}")
    with open(path, "rb") as f:
        raw = np.frombuffer(f.read(n * record), dtype=np.uint8)
    raw = raw.reshape(n, record)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].astype(np.float64).reshape(n, 3, 32, 32) / 255.0
    return images, labels


def one_hot(labels: np.ndarray, n_classes: int = 10) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError("label out of range")
    return np.eye(n_classes)[labels]


def load_digits_split(test_fraction: float = 0.2, seed: int = 0):
    """The offline 8x8 handwritten-digit set (1797 samples, features scaled
    to [0,1]), deterministically shuffled and split. Returns
    (train_x, train_labels, test_x, test_labels) with flat [n, 64] rows."""
    from sklearn.datasets import load_digits
    ds = load_digits()
    x = ds.data.astype(np.float64) / 16.0
    labels = ds.target.astype(np.int64)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(x))
    x, labels = x[perm], labels[perm]
    n_test = int(round(test_fraction * len(x)))
    return x[n_test:], labels[n_test:], x[:n_test], labels[:n_test]


def digits_row_profile(x_flat: np.ndarray) -> np.ndarray:
    """Collapse flat 8x8 digit rows to 8 per-row means (the coarse encoding
    the small analog networks take as input)."""
    x_flat = np.asarray(x_flat, dtype=np.float64)
    return x_flat.reshape(*x_flat.shape[:-1], 8, 8).mean(axis=-1)


def data_dir(override: Optional[str] = None) -> Optional[str]:
    """Resolve the dataset root: explicit override, else EQPROP_DATA_DIR."""
    return override or os.environ.get("EQPROP_DATA_DIR")


def find_mnist(root: Optional[str]):
    """Locate IDX files under root; returns dict of paths or None if any of
    the four standard files is missing."""
    if not root:
        return None
    names = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    paths = {k: os.path.join(root, v) for k, v in names.items()}
    if all(os.path.exists(p) for p in paths.values()):
        return paths
    return None


def find_cifar10(root: Optional[str]):
    """Locate a CIFAR-10 binary batch under root (data_batch_1.bin, possibly
    inside cifar-10-batches-bin/); None if absent."""
    if not root:
        return None
    for rel in ("data_batch_1.bin",
                os.path.join("cifar-10-batches-bin", "data_batch_1.bin")):
        p = os.path.join(root, rel)
        if os.path.exists(p):
            return p
    return None
