"""Datasets, file-format parsers and batch iteration.

Supported sources: the CIFAR-10 binary release (3073-byte records), MNIST
IDX files and a synthetic Gaussian-cluster set for fast tests.
"""

from __future__ import annotations

import gzip
import os
import queue
import struct
import threading
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import ContractError, FormatError

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32, normalized
    labels: np.ndarray  # (N,) int64
    name: str = "dataset"
    classes: int = 10
    mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    std: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ContractError("labels outside [0, classes)")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        """The first ``n`` samples (all of them when ``n`` is 0 or too large)."""
        if n <= 0 or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.name, self.classes, self.mean, self.std)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    return mean, std


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    view = (1, -1, 1, 1)
    return ((images.astype(np.float64) - mean.reshape(view)) / std.reshape(view)).astype(np.float32)


# -- CIFAR-10 -----------------------------------------------------------------


def parse_cifar10_records(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Split raw CIFAR-10 binary bytes into uint8 images (N, 3, 32, 32) and labels."""
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{source}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{source}: record {bad} has label byte {labels[bad]} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def _read(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def load_cifar10_raw(dir_path: str, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    files = CIFAR_TRAIN_FILES if split == "train" else (CIFAR_TEST_FILE,)
    parts = [parse_cifar10_records(_read(os.path.join(dir_path, f)), f) for f in files]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def load_cifar10_bin(dir_path: str, split: str = "train", stats=None) -> Dataset:
    """Load a CIFAR-10 split. ``stats`` = (mean, std) per channel; computed from
    the loaded split when omitted (pass the training stats for the test split)."""
    if split not in ("train", "test"):
        raise ContractError(f"unknown split {split!r}")
    images, labels = load_cifar10_raw(dir_path, split)
    mean, std = stats if stats is not None else channel_stats(images)
    return Dataset(normalize(images, mean, std), labels, "cifar10", 10, mean, std)


def load_cifar10(dir_path: str) -> tuple[Dataset, Dataset]:
    train = load_cifar10_bin(dir_path, "train")
    test = load_cifar10_bin(dir_path, "test", stats=(train.mean, train.std))
    return train, test


# -- MNIST IDX ----------------------------------------------------------------


def _idx_bytes(dir_path: str, stem: str) -> bytes:
    for name in (stem, stem.replace("-idx", ".idx"), stem + ".gz", stem.replace("-idx", ".idx") + ".gz"):
        path = os.path.join(dir_path, name)
        if os.path.exists(path):
            raw = _read(path)
            return gzip.decompress(raw) if name.endswith(".gz") else raw
    raise FileNotFoundError(os.path.join(dir_path, stem))


def parse_idx(raw: bytes, expect_magic: int, source: str = "<bytes>") -> np.ndarray:
    """Parse a big-endian IDX file of unsigned bytes."""
    if len(raw) < 8:
        raise FormatError(f"{source}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise FormatError(f"{source}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{source}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(f"{source}: payload {len(raw) - header} bytes, header declares {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(dir_path: str, split: str = "train", stats=None) -> Dataset:
    prefix = "train" if split == "train" else "t10k"
    images = parse_idx(_idx_bytes(dir_path, f"{prefix}-images-idx3-ubyte"), IDX_IMAGE_MAGIC, f"{prefix} images")
    labels = parse_idx(_idx_bytes(dir_path, f"{prefix}-labels-idx1-ubyte"), IDX_LABEL_MAGIC, f"{prefix} labels")
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise FormatError(f"image dims {images.shape} do not match label dims {labels.shape}")
    labels = labels.astype(np.int64)
    classes = max(10, int(labels.max()) + 1) if labels.size else 10
    images = images[:, None, :, :]
    mean, std = stats if stats is not None else channel_stats(images)
    return Dataset(normalize(images, mean, std), labels, "mnist", classes, mean, std)


def load_mnist(dir_path: str) -> tuple[Dataset, Dataset]:
    train = load_mnist_idx(dir_path, "train")
    test = load_mnist_idx(dir_path, "test", stats=(train.mean, train.std))
    return train, test


# -- synthetic ----------------------------------------------------------------


def synth_dataset(n: int, classes: int = 10, seed: int = 0, shape=(1, 8, 8)) -> Dataset:
    """Gaussian clusters, one per class, separable with a wide margin.

    Class centres are random directions of norm 6 in the flattened image
    space; samples add isotropic noise of standard deviation 0.5.
    """
    if n < classes:
        raise ContractError(f"need n >= classes, got n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    centres = rng.standard_normal((classes, dim))
    centres *= 6.0 / np.linalg.norm(centres, axis=1, keepdims=True)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    x = centres[labels] + 0.5 * rng.standard_normal((n, dim))
    images = x.reshape((n,) + tuple(shape)).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), "synth", classes, np.zeros(shape[0]), np.ones(shape[0]))


# -- batching -----------------------------------------------------------------


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random pad-and-crop plus horizontal flip, one draw per image."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


@dataclass
class BatchIterator:
    """Epoch-wise batches; order and augmentation are keyed on (seed, epoch)."""

    dataset: Dataset
    batch_size: int = 64
    shuffle: bool = True
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch size must be >= 1")

    def steps_per_epoch(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        n = len(self.dataset)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.seed, epoch]).permutation(n)

    def epoch(self, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        idx = self.order(epoch)
        aug_rng = np.random.default_rng([self.seed, epoch, 1])
        for start in range(0, len(idx), self.batch_size):
            sel = idx[start : start + self.batch_size]
            images = self.dataset.images[sel]
            if self.augment:
                images = augment_batch(images, aug_rng)
            yield images, self.dataset.labels[sel]


def next_batch(it: Iterator):
    """Next (images, labels) of an epoch iterator; None signals end of epoch."""
    return next(it, None)


_END = object()


def prefetch(source: Iterator, depth: int = 2) -> Iterator:
    """Produce items of ``source`` on a background thread through a bounded queue."""
    q: "queue.Queue" = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def worker():
        try:
            for item in source:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(_END)
        except BaseException as exc:  # surfaced on the consumer thread
            q.put(exc)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is _END:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


def load_dataset(name: str, dir_path: Optional[str] = None, synth_n: int = 2000, synth_classes: int = 10, seed: int = 0):
    """(train, test) for a dataset name: cifar10, mnist or synth."""
    name = name.lower()
    if name == "cifar10":
        return load_cifar10(dir_path)
    if name == "mnist":
        return load_mnist(dir_path)
    if name == "synth":
        full = synth_dataset(synth_n + max(synth_n // 4, synth_classes), synth_classes, seed)
        train = Dataset(full.images[:synth_n], full.labels[:synth_n], "synth", synth_classes, full.mean, full.std)
        test = Dataset(full.images[synth_n:], full.labels[synth_n:], "synth", synth_classes, full.mean, full.std)
        return train, test
    raise ContractError(f"unknown dataset {name!r}")
