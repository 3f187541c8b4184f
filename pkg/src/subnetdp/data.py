"""Synthetic datasets and the raw binary image-file format.

Binary layout: six little-endian int32 header words (magic, record
count, channels, height, width, classes) followed by one record per
sample: a single label byte then channels*height*width raw pixel bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

MAGIC = 0x53_4E_44_50  # "SNDP"
_HEADER = struct.Struct("<6i")

KINDS = ("synthetic-blobs", "synthetic-spirals", "binary-image-file")


@dataclass
class Dataset:
    kind: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    classes: int

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.train_x.shape[1:]


def _balanced_labels(rng: np.random.Generator, count: int, classes: int) -> np.ndarray:
    labels = np.arange(count) % classes
    return labels[rng.permutation(count)].astype(np.int64)


def _standardize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (axis 1) standardization using train-split statistics."""
    axes = (0,) + tuple(range(2, train.ndim))
    mean = train.mean(axis=axes, keepdims=True)
    std = train.std(axis=axes, keepdims=True)
    std = np.where(std < 1e-12, 1.0, std)
    return (train - mean) / std, (test - mean) / std


def make_blobs(
    train_size: int,
    test_size: int,
    classes: int,
    channels: int = 3,
    height: int = 8,
    width: int = 8,
    noise: float = 1.0,
    seed: int = 0,
    flatten: bool = False,
) -> Dataset:
    """Gaussian blobs around per-class prototype images."""
    rng = np.random.default_rng(seed)
    prototypes = rng.normal(size=(classes, channels, height, width))

    def draw(count):
        labels = _balanced_labels(rng, count, classes)
        xs = prototypes[labels] + noise * rng.normal(size=(count, channels, height, width))
        return xs, labels

    train_x, train_y = draw(train_size)
    test_x, test_y = draw(test_size)
    train_x, test_x = _standardize(train_x, test_x)
    if flatten:
        train_x = train_x.reshape(train_size, -1)
        test_x = test_x.reshape(test_size, -1)
    return Dataset("synthetic-blobs", train_x, train_y, test_x, test_y, classes)


def make_spirals(
    train_size: int,
    test_size: int,
    classes: int = 3,
    noise: float = 0.08,
    seed: int = 0,
) -> Dataset:
    """Interleaved 2-d spirals, one arm per class."""
    rng = np.random.default_rng(seed)

    def draw(count):
        labels = _balanced_labels(rng, count, classes)
        t = rng.uniform(0.1, 1.0, size=count)
        angle = 2.5 * np.pi * t + 2.0 * np.pi * labels / classes
        xs = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
        xs += noise * rng.normal(size=xs.shape)
        return xs, labels

    train_x, train_y = draw(train_size)
    test_x, test_y = draw(test_size)
    train_x, test_x = _standardize(train_x, test_x)
    return Dataset("synthetic-spirals", train_x, train_y, test_x, test_y, classes)


def write_binary(path: str | Path, images: np.ndarray, labels: np.ndarray, classes: int) -> None:
    """Write uint8 images [n, C, H, W] with byte labels to the raw format."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8:
        raise DataError(f"binary format stores uint8 pixels, got {images.dtype}")
    if images.ndim != 4 or len(labels) != len(images):
        raise DataError("expected images [n, C, H, W] with one label per image")
    if labels.min() < 0 or labels.max() >= min(classes, 256):
        raise DataError(f"labels must fit in a byte within [0, {classes})")
    n, c, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, c, h, w, classes))
        for i in range(n):
            fh.write(bytes([int(labels[i])]))
            fh.write(images[i].tobytes())


def read_binary(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    """Read the raw format back as (uint8 images, int64 labels, classes)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file {path} does not exist")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header, {len(raw)} bytes < {_HEADER.size}")
    magic, n, c, h, w, classes = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{MAGIC:08x}")
    if min(n, c, h, w, classes) <= 0:
        raise DataError(f"{path}: non-positive header field in {(n, c, h, w, classes)}")
    record = 1 + c * h * w
    expected = _HEADER.size + n * record
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {n} records, found {len(raw)}")
    labels = np.empty(n, dtype=np.int64)
    images = np.empty((n, c, h, w), dtype=np.uint8)
    offset = _HEADER.size
    for i in range(n):
        labels[i] = raw[offset]
        images[i] = np.frombuffer(raw, dtype=np.uint8, count=c * h * w,
                                  offset=offset + 1).reshape(c, h, w)
        offset += record
    if labels.max() >= classes:
        raise DataError(f"{path}: label {labels.max()} outside [0, {classes})")
    return images, labels, classes


def load_binary_dataset(path: str | Path, test_fraction: float = 0.2) -> Dataset:
    """Load a raw file, split off the trailing fraction as the test set,
    scale pixels to [0, 1], and standardize per channel with train stats."""
    images, labels, classes = read_binary(path)
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(images)
    n_test = max(1, int(round(n * test_fraction)))
    if n_test >= n:
        raise DataError(f"{path}: {n} records cannot support test fraction {test_fraction}")
    split = n - n_test
    train_x = images[:split].astype(np.float64) / 255.0
    test_x = images[split:].astype(np.float64) / 255.0
    train_x, test_x = _standardize(train_x, test_x)
    return Dataset("binary-image-file", train_x, labels[:split], test_x, labels[split:], classes)


def load_dataset(cfg) -> Dataset:
    """Build a Dataset from a DatasetConfig-like object."""
    kind = cfg.kind
    if kind == "synthetic-blobs":
        return make_blobs(cfg.train_size, cfg.test_size, cfg.classes, cfg.channels,
                          cfg.height, cfg.width, cfg.noise, cfg.seed, cfg.flatten)
    if kind == "synthetic-spirals":
        return make_spirals(cfg.train_size, cfg.test_size, cfg.classes, cfg.noise, cfg.seed)
    if kind == "binary-image-file":
        if not cfg.path:
            raise ConfigError("dataset kind binary-image-file requires a path")
        return load_binary_dataset(cfg.path, cfg.test_fraction)
    raise ConfigError(f"unknown dataset kind {kind!r}, expected one of {KINDS}")
