"""MNIST-style IDX loading, normalization, and batch iteration.

IDX files are big-endian: a 4-byte magic (2051 for images, 2049 for
labels), dimension sizes as u32, then raw bytes. Plain and gzip files
are both accepted; gzip is detected from the 0x1f8b signature, not the
file name.
"""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

# Standard normalization constants for MNIST pixel values scaled to [0,1].
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


@dataclass
class Dataset:
    """Normalized images (N,1,H,W) float64 and labels (N,) int64."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.images.shape[0]


def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"idx file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx_images(path):
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header, {len(raw)} bytes")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise ValueError(f"{path}: image magic {magic} != {IMAGE_MAGIC}")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload is {len(raw)} bytes, expected {expected} "
            f"for {count} images of {rows}x{cols}"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows, cols)


def _parse_idx_labels(path):
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated header, {len(raw)} bytes")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise ValueError(f"{path}: label magic {magic} != {LABEL_MAGIC}")
    if len(raw) != 8 + count:
        raise ValueError(
            f"{path}: payload is {len(raw)} bytes, expected {8 + count} for {count} labels"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def normalize_images(pixels_u8):
    """uint8 (N,H,W) -> float64 (N,1,H,W), scaled to [0,1] then standardized."""
    x = pixels_u8.astype(np.float64) / 255.0
    x = (x - MNIST_MEAN) / MNIST_STD
    return x[:, None, :, :]


def load_idx(images_path, labels_path):
    """Load a paired IDX image/label file set into a normalized Dataset."""
    pixels = _parse_idx_images(images_path)
    labels = _parse_idx_labels(labels_path)
    if pixels.shape[0] != labels.shape[0]:
        raise ValueError(
            f"count mismatch: {pixels.shape[0]} images in {images_path} "
            f"but {labels.shape[0]} labels in {labels_path}"
        )
    if labels.size and labels.max() > 9:
        raise ValueError(f"{labels_path}: label {labels.max()} outside [0, 10)")
    return Dataset(images=normalize_images(pixels), labels=labels.astype(np.int64))


def save_idx(pixels_u8, labels_u8, images_path, labels_path):
    """Write uint8 images (N,H,W) and labels (N,) as plain IDX files."""
    pixels_u8 = np.ascontiguousarray(pixels_u8, dtype=np.uint8)
    labels_u8 = np.ascontiguousarray(labels_u8, dtype=np.uint8)
    if pixels_u8.ndim != 3:
        raise ValueError(f"save_idx expects (N,H,W) images, got {pixels_u8.shape}")
    if labels_u8.shape != (pixels_u8.shape[0],):
        raise ValueError(
            f"save_idx: {pixels_u8.shape[0]} images but labels shape {labels_u8.shape}"
        )
    n, rows, cols = pixels_u8.shape
    Path(images_path).write_bytes(
        struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + pixels_u8.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">II", LABEL_MAGIC, n) + labels_u8.tobytes()
    )


def _find(data_dir, stem):
    base = Path(data_dir) / stem
    for candidate in (base, base.with_name(base.name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"missing {stem}[.gz] under {data_dir}")


def load_mnist(data_dir, split="train"):
    """Load the canonical MNIST file pair for the given split from a directory."""
    if split == "train":
        img_stem, lbl_stem = TRAIN_FILES
    elif split == "test":
        img_stem, lbl_stem = TEST_FILES
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    return load_idx(_find(data_dir, img_stem), _find(data_dir, lbl_stem))


def batch_iter(dataset, batch_size, seed):
    """Yield (images, labels) minibatches in a seeded random order.

    The permutation comes from PCG64 seeded with the given integer, so a
    fixed seed reproduces the exact batch sequence. The final short batch
    is kept.
    """
    n = len(dataset)
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        sel = order[start:start + batch_size]
        yield dataset.images[sel], dataset.labels[sel]
