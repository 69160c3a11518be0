"""Dataset handling: IDX files, preprocessing, batching, synthetic digits.

The IDX codec implements the classic big-endian layout used by the MNIST
distribution: a 4-byte magic (0x00000801 for unsigned-byte label vectors,
0x00000803 for unsigned-byte image stacks), one big-endian u32 per
dimension, then the raw payload.  Parsing and serialization round-trip
byte-identically.

Because curated digit files are not always available where experiments
run, :func:`synthesize_digits` fabricates an MNIST-shaped corpus (28x28
unsigned-byte images, ten classes) from noisy class prototypes with a
fixed seed.  It exists so the full pipeline, including the IDX codec, can
be exercised end to end without a download step.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Rng, mix64

__all__ = [
    "IdxError",
    "IdxBadMagic",
    "IdxTruncated",
    "IdxDimensionOverflow",
    "parse_idx",
    "serialize_idx",
    "read_idx_file",
    "Dataset",
    "to_dataset",
    "subset",
    "minibatches",
    "global_contrast_normalize",
    "synthesize_digits",
    "load_idx_pair",
    "load_mnist_dir",
]

MAGIC_LABELS = 0x00000801
MAGIC_IMAGES = 0x00000803

# A payload this large is never a plausible digit file; treat it as a
# corrupt header rather than attempting the allocation.
_MAX_ELEMENTS = 1 << 40


class IdxError(ValueError):
    """Malformed IDX data."""


class IdxBadMagic(IdxError):
    pass


class IdxTruncated(IdxError):
    pass


class IdxDimensionOverflow(IdxError):
    pass


def parse_idx(data: bytes) -> np.ndarray:
    """Decode IDX bytes into a uint8 array (1-D labels or 3-D images)."""
    if len(data) < 4:
        raise IdxTruncated("truncated header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == MAGIC_LABELS:
        ndim = 1
    elif magic == MAGIC_IMAGES:
        ndim = 3
    else:
        raise IdxBadMagic(f"bad magic 0x{magic:08x}")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxTruncated("truncated dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_ELEMENTS:
        raise IdxDimensionOverflow(f"dimension overflow: {dims}")
    payload = data[header_end:]
    if len(payload) < count:
        raise IdxTruncated(f"truncated payload: expected {count} bytes, got {len(payload)}")
    if len(payload) > count:
        raise IdxError(f"oversized payload: expected {count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()


def serialize_idx(array: np.ndarray) -> bytes:
    """Encode a uint8 array as IDX bytes (inverse of :func:`parse_idx`)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise IdxError(f"only uint8 payloads are supported, got {array.dtype}")
    if array.ndim == 1:
        magic = MAGIC_LABELS
    elif array.ndim == 3:
        magic = MAGIC_IMAGES
    else:
        raise IdxError(f"only 1-D labels or 3-D images are supported, got ndim={array.ndim}")
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    return header + array.tobytes()


def read_idx_file(path: str | Path) -> np.ndarray:
    """Read an IDX file, transparently decompressing gzip."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Flat feature matrix plus integer labels."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        if len(self.X) != len(self.y):
            raise ValueError(f"{len(self.X)} examples but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)


def to_dataset(images: np.ndarray, labels: np.ndarray, scale: float = 1.0 / 255.0) -> Dataset:
    """Flatten an image stack and scale pixels into [0, 1]."""
    images = np.asarray(images)
    X = images.reshape(len(images), -1).astype(np.float64) * scale
    y = np.asarray(labels).astype(np.int64)
    return Dataset(X, y)


def subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """First ``n`` examples of a seeded shuffle of ``ds``."""
    if n > len(ds):
        raise ValueError(f"requested {n} examples from a dataset of {len(ds)}")
    perm = Rng(seed).permutation(len(ds))[:n]
    return Dataset(ds.X[perm].copy(), ds.y[perm].copy())


def minibatches(ds: Dataset, batch_size: int, seed: int, epoch: int):
    """Yield (X, y) batches in a (seed, epoch)-keyed shuffled order.

    The final batch may be short.  The order depends only on the two keys
    and the dataset length, never on global RNG state.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    perm = Rng(mix64(seed) + epoch).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = perm[start : start + batch_size]
        yield ds.X[idx], ds.y[idx]


def global_contrast_normalize(X: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Center each row and divide by max(row_norm / sqrt(dim), eps)."""
    X = np.asarray(X, dtype=np.float64)
    centered = X - X.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1, keepdims=True) / np.sqrt(X.shape[1])
    return centered / np.maximum(norms, eps)


# ---------------------------------------------------------------------------
# synthetic digit corpus
# ---------------------------------------------------------------------------

def synthesize_digits(
    n_train: int,
    n_test: int,
    seed: int = 0,
    image_side: int = 28,
    n_classes: int = 10,
    noise: float = 1.5,
    sparsity: float = 0.68,
    styles: int = 2,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Fabricate an MNIST-shaped corpus of noisy prototype images.

    Each class owns a few blocky stroke-like prototype "styles": coarse
    random grids thresholded so most cells are dark (as handwritten digit
    pixels are), upsampled to ``image_side``.  An example is one style of
    its class plus heavy uniform pixel noise, clipped to [0, 1] and
    quantized to bytes.  The default noise level makes the task land in
    the mid-single-digit error range for a small maxout network, so
    precision effects show up as measurable error ratios rather than
    vanishing into a floor or ceiling.

    Returns ``(train_images, train_labels, test_images, test_labels)``
    with uint8 image stacks of shape (n, side, side).
    """
    rng = Rng(mix64(seed) ^ 0x5EED5EED)
    coarse = image_side // 4
    up = image_side // coarse
    protos = np.empty((n_classes, styles, image_side, image_side))
    for c in range(n_classes):
        for s in range(styles):
            grid = rng.uniform((coarse, coarse))
            lit = np.where(grid > sparsity, (grid - sparsity) / (1.0 - sparsity), 0.0)
            block = np.kron(lit, np.ones((up, up)))
            pad = image_side - block.shape[0]
            if pad:
                block = np.pad(block, ((0, pad), (0, pad)), mode="edge")
            protos[c, s] = block

    def make_split(n: int, stream: Rng) -> tuple[np.ndarray, np.ndarray]:
        labels = np.arange(n, dtype=np.int64) % n_classes
        labels = labels[stream.permutation(n)]
        style = stream.integers((n,), 0, styles)
        base = protos[labels, style]
        jitter = stream.uniform((n, image_side, image_side), -noise, noise)
        pixels = np.clip(base + jitter, 0.0, 1.0)
        return np.rint(pixels * 255.0).astype(np.uint8), labels

    train_images, train_labels = make_split(n_train, rng.split())
    test_images, test_labels = make_split(n_test, rng.split())
    return train_images, train_labels, test_images, test_labels


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def load_idx_pair(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Load one split from an images file plus a labels file."""
    images = read_idx_file(images_path)
    labels = read_idx_file(labels_path)
    if images.ndim != 3:
        raise IdxError(f"{images_path}: expected an image stack")
    if labels.ndim != 1:
        raise IdxError(f"{labels_path}: expected a label vector")
    return to_dataset(images, labels)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_idx(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        candidate = root / name
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"dataset not found: {root / stem}[.gz]")


def load_mnist_dir(root: str | Path) -> tuple[Dataset, Dataset]:
    """Load the canonical four-file digit layout from a directory."""
    root = Path(root)
    splits = []
    for split in ("train", "test"):
        img_stem, lbl_stem = _MNIST_FILES[split]
        splits.append(load_idx_pair(_find_idx(root, img_stem), _find_idx(root, lbl_stem)))
    return splits[0], splits[1]
