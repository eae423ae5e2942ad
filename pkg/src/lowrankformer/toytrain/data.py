"""Datasets: MNIST IDX files and the synthetic majority-token task."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
ALPHABET = 16

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray  # (N, seq_len) integer tokens
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    vocab_size: int

    @property
    def seq_len(self) -> int:
        return self.x_train.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    seq_len: int = 32
    n_train: int = 4000
    n_test: int = 1000
    seed: int = 0
    # probability that a position is forced to the sample's class symbol
    boost: float = 0.1


# -- IDX -----------------------------------------------------------------

def _read_bytes(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise FileNotFoundError(f"missing IDX file {path}")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX file: big-endian magic, dims, then payload."""
    path = Path(path)
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) - header < count:
        raise IdxFormatError(f"{path}: truncated payload ({len(buf) - header} of {count} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used for fixtures and round-trips)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def pool_images(images: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool (N, H, W) images by ``factor`` and flatten row-major to 0-255 tokens."""
    n, h, w = images.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"downsample factor {factor} must divide image size {h}x{w}")
    pooled = images.reshape(n, h // factor, factor, w // factor, factor).astype(np.float64)
    pooled = pooled.mean(axis=(2, 4))
    return np.clip(np.rint(pooled), 0, 255).astype(np.int64).reshape(n, -1)


def load_mnist_idx(directory, downsample_factor: int = 1) -> Dataset:
    d = Path(directory)
    parts = {}
    for split in ("train", "test"):
        images = read_idx(d / MNIST_FILES[f"{split}_images"], IMAGE_MAGIC)
        labels = read_idx(d / MNIST_FILES[f"{split}_labels"], LABEL_MAGIC)
        if images.shape[0] != labels.shape[0]:
            raise IdxFormatError(
                f"{split}: {images.shape[0]} images but {labels.shape[0]} labels")
        parts[split] = (pool_images(images, downsample_factor), labels.astype(np.int64))
    return Dataset(*parts["train"], *parts["test"], n_classes=10, vocab_size=256)


# -- synthetic -------------------------------------------------------------

def majority_label(seq: np.ndarray, n_classes: int) -> int:
    """Most frequent symbol among 0..n_classes-1; ties go to the smallest id."""
    counts = np.bincount(np.asarray(seq), minlength=ALPHABET)[:n_classes]
    return int(np.argmax(counts))


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    if spec.n_classes > ALPHABET:
        raise ValueError(f"n_classes={spec.n_classes} exceeds the alphabet size {ALPHABET}")
    if spec.n_classes < 1 or spec.seq_len < 1:
        raise ValueError("n_classes and seq_len must be positive")
    rng = np.random.default_rng(spec.seed)

    def draw(count):
        targets = rng.permutation(np.arange(count) % spec.n_classes)
        x = np.empty((count, spec.seq_len), dtype=np.int64)
        for i, c in enumerate(targets):
            while True:
                seq = rng.integers(0, ALPHABET, size=spec.seq_len)
                seq[rng.random(spec.seq_len) < spec.boost] = c
                if majority_label(seq, spec.n_classes) == c:
                    break
            x[i] = seq
        return x, targets.astype(np.int64)

    x_tr, y_tr = draw(spec.n_train)
    x_te, y_te = draw(spec.n_test)
    return Dataset(x_tr, y_tr, x_te, y_te, spec.n_classes, ALPHABET)
