"""Dataset ingestion, deterministic splitting and seeded mini-batch sampling.

IDX files are parsed bit-exactly: big-endian 32-bit magic (0x00000803 for
images, 0x00000801 for labels), big-endian 32-bit dimension sizes, then an
unsigned-byte payload.  Pixel values are scaled to [0, 1] by dividing by 255.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    IdxDimensionError,
    IdxFormatError,
    IdxMagicError,
    IdxTruncatedError,
    ShapeError,
)
from .rng import STREAM_BATCH, STREAM_DATA, STREAM_SUBSET, make_rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Feature matrix plus integer labels; immutable after construction."""

    features: np.ndarray  # (n, dims) float64
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got {self.features.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ShapeError("labels must be 1-D with one entry per feature row")
        if self.n > 0 and self.labels.min() < 0:
            raise ShapeError("labels must be non-negative")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.n else 0


# --------------------------------------------------------------------------
# IDX files
# --------------------------------------------------------------------------


def _read_header(raw: bytes, path: str, expected_magic: int, ndim: int):
    header_len = 4 * (1 + ndim)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the 4-byte magic")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(
            f"{path}: wrong magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    if len(raw) < header_len:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}i", raw[4:header_len])
    return dims, raw[header_len:]


def load_mnist_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label pair; pixels divided by 255."""
    with open(images_path, "rb") as f:
        raw = f.read()
    (n, rows, cols), payload = _read_header(raw, images_path, IMAGES_MAGIC, 3)
    expected = n * rows * cols
    if len(payload) < expected:
        raise IdxTruncatedError(
            f"{images_path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    if len(payload) > expected:
        raise IdxFormatError(f"{images_path}: {len(payload) - expected} trailing bytes")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows * cols)

    with open(labels_path, "rb") as f:
        raw = f.read()
    (n_labels,), payload = _read_header(raw, labels_path, LABELS_MAGIC, 1)
    if len(payload) < n_labels:
        raise IdxTruncatedError(
            f"{labels_path}: payload has {len(payload)} bytes, header promises {n_labels}"
        )
    if len(payload) > n_labels:
        raise IdxFormatError(f"{labels_path}: {len(payload) - n_labels} trailing bytes")
    labels = np.frombuffer(payload, dtype=np.uint8)

    if n != n_labels:
        raise IdxDimensionError(
            f"{images_path} holds {n} images but {labels_path} holds {n_labels} labels"
        )
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def save_idx(dataset: Dataset, images_path: str, labels_path: str, side: int | None = None) -> None:
    """Write a dataset to an IDX image/label pair.

    Features must lie in [0, 1]; they are quantized to bytes, so the
    write/reload round-trip is exact only for values on the k/255 grid.
    """
    if side is None:
        side = int(round(np.sqrt(dataset.dims)))
    if side * side != dataset.dims:
        raise ShapeError(f"feature dim {dataset.dims} is not a square image")
    pixels = np.rint(dataset.features * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise ShapeError("features must lie in [0, 1] to be written as bytes")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IMAGES_MAGIC, dataset.n, side, side))
        f.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", LABELS_MAGIC, dataset.n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# --------------------------------------------------------------------------
# Synthetic datasets
# --------------------------------------------------------------------------


def _balanced_labels(n: int, classes: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64) % classes


def synth_gaussian_mixture(n: int, dims: int, classes: int, seed: int) -> Dataset:
    """Class-balanced unit-variance Gaussians around seeded random means."""
    if n < classes:
        raise ShapeError(f"need n >= classes, got n={n}, classes={classes}")
    rng = make_rng(seed, STREAM_DATA)
    means = rng.normal(0.0, 2.0, size=(classes, dims))
    labels = _balanced_labels(n, classes)
    features = means[labels] + rng.normal(0.0, 1.0, size=(n, dims))
    return Dataset(features, labels)


def synth_digit_images(
    n: int, seed: int, classes: int = 10, side: int = 28, noise: float = 0.25
) -> Dataset:
    """Byte-quantized image mixture: a stand-in corpus for the IDX pipeline.

    Each class gets a smooth random template (a few Gaussian bumps on the
    side x side grid); samples jitter the template brightness and add pixel
    noise, then quantize to the k/255 grid so IDX round-trips are exact.
    """
    if n < classes:
        raise ShapeError(f"need n >= classes, got n={n}, classes={classes}")
    rng = make_rng(seed, STREAM_DATA)
    yy, xx = np.mgrid[0:side, 0:side]
    templates = np.zeros((classes, side, side))
    for c in range(classes):
        for _ in range(4):
            cy, cx = rng.uniform(4, side - 4, size=2)
            width = rng.uniform(2.0, 4.5)
            templates[c] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        templates[c] *= 0.9 / templates[c].max()
    labels = _balanced_labels(n, classes)
    brightness = rng.uniform(0.7, 1.0, size=(n, 1, 1))
    pixels = templates[labels] * brightness + noise * rng.normal(size=(n, side, side))
    pixels = np.clip(pixels, 0.0, 1.0)
    quantized = np.rint(pixels * 255.0) / 255.0
    return Dataset(quantized.reshape(n, side * side), labels)


def take_subset(dataset: Dataset, m: int, seed: int) -> Dataset:
    """First m rows of the seeded shuffle; subset(m1) is a prefix of subset(m2)."""
    if m > dataset.n:
        raise ShapeError(f"subset of {m} from {dataset.n} samples")
    perm = make_rng(seed, STREAM_SUBSET).permutation(dataset.n)[:m]
    return Dataset(dataset.features[perm].copy(), dataset.labels[perm].copy())


def split_dataset(dataset: Dataset, n_first: int, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then split into (first n_first, rest)."""
    if n_first > dataset.n:
        raise ShapeError(f"split of {n_first} from {dataset.n} samples")
    perm = make_rng(seed, STREAM_SUBSET).permutation(dataset.n)
    a, b = perm[:n_first], perm[n_first:]
    return (
        Dataset(dataset.features[a].copy(), dataset.labels[a].copy()),
        Dataset(dataset.features[b].copy(), dataset.labels[b].copy()),
    )


# --------------------------------------------------------------------------
# Mini-batch sampling
# --------------------------------------------------------------------------


@dataclass
class BatchSampler:
    """Seeded mini-batch index source; single-owner mutable state.

    epoch mode: a fresh seeded permutation per epoch, every index exactly
    once; the final batch of an epoch is short when batch_size does not
    divide n.  replacement mode: each batch is batch_size i.i.d. uniform
    draws (batch_size may exceed n here).
    """

    seed: int
    batch_size: int
    n: int
    mode: str = "epoch"  # "epoch" | "replacement"
    _epoch: int = field(default=0, repr=False)
    _pos: int = field(default=0, repr=False)
    _perm: np.ndarray | None = field(default=None, repr=False)
    _draw: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.mode not in ("epoch", "replacement"):
            raise ShapeError(f"unknown sampling mode {self.mode!r}")
        if self.batch_size < 1:
            raise ShapeError("batch_size must be >= 1")
        if self.mode == "epoch" and self.batch_size > self.n:
            raise ShapeError(
                f"batch_size {self.batch_size} exceeds dataset size {self.n} in epoch mode"
            )

    def next_indices(self) -> np.ndarray:
        if self.mode == "replacement":
            rng = make_rng(self.seed, STREAM_BATCH, self._draw)
            self._draw += 1
            return rng.integers(0, self.n, size=self.batch_size)
        if self._perm is None or self._pos >= self.n:
            self._perm = make_rng(self.seed, STREAM_BATCH, self._epoch).permutation(self.n)
            self._epoch += 1
            self._pos = 0
        idx = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def next_batch(
    sampler: BatchSampler, dataset: Dataset
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Advance the sampler and return (indices, features, labels)."""
    if sampler.n != dataset.n:
        raise ShapeError("sampler was built for a dataset of a different size")
    idx = sampler.next_indices()
    return idx, dataset.features[idx], dataset.labels[idx]
