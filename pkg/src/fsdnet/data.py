"""Dataset ingestion: CIFAR binary, MNIST IDX, synthetic finite-state images.

Pixel bytes are divided by 255.0 exactly; no centering or whitening.
Shuffling uses a documented xorshift64* generator so batch orderings
are reproducible from the seed alone, independent of numpy's RNG.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ContractError, FormatError

_CIFAR10_RECORD = 3073  # 1 label byte + 32*32*3 pixel bytes
_CIFAR100_RECORD = 3074  # coarse byte + fine byte + pixels


@dataclass
class LabeledImageSet:
    """Images (N, H, W, C) as float64 in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ContractError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError("pixel values outside [0, 1]")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.class_count
        ):
            raise ContractError(
                f"labels outside [0, {self.class_count}) found"
            )

    def __len__(self) -> int:
        return self.images.shape[0]


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def read_cifar10(path) -> LabeledImageSet:
    """CIFAR-10 binary batches: records of 1 label byte + 3072 plane-major pixels."""
    raw = _read_bytes(path)
    if len(raw) % _CIFAR10_RECORD != 0:
        raise FormatError(
            f"{path}: length {len(raw)} is not a multiple of {_CIFAR10_RECORD} "
            f"(trailing {len(raw) % _CIFAR10_RECORD} bytes at offset "
            f"{len(raw) - len(raw) % _CIFAR10_RECORD})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR10_RECORD)
    labels = records[:, 0].astype(np.int64)
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return LabeledImageSet(pixels / 255.0, labels, class_count=10)


def write_cifar10(dataset: LabeledImageSet, path) -> None:
    """Inverse of read_cifar10; used for fixtures and round-trip checks."""
    n, h, w, c = dataset.images.shape
    if (h, w, c) != (32, 32, 3):
        raise ContractError(f"CIFAR-10 layout needs 32x32x3 images, got {h}x{w}x{c}")
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    planes = pixels.transpose(0, 3, 1, 2).reshape(n, 3072)
    records = np.concatenate(
        [dataset.labels.astype(np.uint8)[:, None], planes], axis=1
    )
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def read_cifar100(path) -> LabeledImageSet:
    """CIFAR-100 binary: coarse byte, fine byte, then pixels; fine labels kept."""
    raw = _read_bytes(path)
    if len(raw) % _CIFAR100_RECORD != 0:
        raise FormatError(
            f"{path}: length {len(raw)} is not a multiple of {_CIFAR100_RECORD} "
            f"(trailing {len(raw) % _CIFAR100_RECORD} bytes at offset "
            f"{len(raw) - len(raw) % _CIFAR100_RECORD})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR100_RECORD)
    labels = records[:, 1].astype(np.int64)
    pixels = records[:, 2:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return LabeledImageSet(pixels / 255.0, labels, class_count=100)


def _read_idx_header(raw: bytes, path, expected_magic: int, dims: int) -> tuple:
    header_len = 4 * (1 + dims)
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated IDX header")
    magic = int.from_bytes(raw[0:4], "big")
    if magic != expected_magic:
        raise FormatError(
            f"{path}: IDX magic mismatch, expected {expected_magic}, found {magic}"
        )
    extents = [
        int.from_bytes(raw[4 * (i + 1): 4 * (i + 2)], "big") for i in range(dims)
    ]
    return extents, raw[header_len:]


def read_mnist_idx(images_path, labels_path) -> LabeledImageSet:
    """MNIST-style IDX pair: big-endian magics 2051 (images) and 2049 (labels)."""
    (n, rows, cols), body = _read_idx_header(
        _read_bytes(images_path), images_path, 2051, dims=3
    )
    if len(body) != n * rows * cols:
        raise FormatError(
            f"{images_path}: expected {n * rows * cols} pixel bytes, found {len(body)}"
        )
    (n_labels,), label_body = _read_idx_header(
        _read_bytes(labels_path), labels_path, 2049, dims=1
    )
    if len(label_body) != n_labels:
        raise FormatError(
            f"{labels_path}: expected {n_labels} label bytes, found {len(label_body)}"
        )
    if n != n_labels:
        raise FormatError(
            f"image count {n} ({images_path}) does not match label count "
            f"{n_labels} ({labels_path})"
        )
    images = np.frombuffer(body, dtype=np.uint8).reshape(n, rows, cols, 1) / 255.0
    labels = np.frombuffer(label_body, dtype=np.uint8).astype(np.int64)
    return LabeledImageSet(images, labels, class_count=10)


def synth_fsd(
    classes: int,
    per_class: int,
    height: int,
    width: int,
    states: int,
    separation: float,
    rng: np.random.Generator,
) -> LabeledImageSet:
    """Synthetic finite-state images for desk-scale runs.

    Each class owns a random per-pixel target state; pixels are drawn
    from (1 - separation) * uniform + separation * delta(target) and
    mapped to the grid {0, 1/(D-1), ..., 1}.  separation 0 gives
    indistinguishable classes, separation 1 deterministic patterns.
    Samples are ordered class-major.
    """
    if not 0.0 <= separation <= 1.0:
        raise ContractError(f"separation must be in [0, 1], got {separation}")
    if states < 2:
        raise ContractError(f"need at least 2 states, got {states}")
    targets = rng.integers(0, states, size=(classes, height, width))
    take_target = rng.random(size=(classes, per_class, height, width)) < separation
    uniform_draw = rng.integers(0, states, size=(classes, per_class, height, width))
    drawn = np.where(take_target, targets[:, None, :, :], uniform_draw)
    images = drawn.reshape(classes * per_class, height, width, 1) / (states - 1)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    return LabeledImageSet(images, labels, class_count=classes)


def split_per_class(dataset: LabeledImageSet, first_n: int) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Split class-major data into the first n per class and the rest."""
    head_idx, tail_idx = [], []
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        head_idx.extend(members[:first_n])
        tail_idx.extend(members[first_n:])
    head = np.asarray(head_idx, dtype=np.int64)
    tail = np.asarray(tail_idx, dtype=np.int64)
    return (
        LabeledImageSet(dataset.images[head], dataset.labels[head], dataset.class_count),
        LabeledImageSet(dataset.images[tail], dataset.labels[tail], dataset.class_count),
    )


class XorShift64Star:
    """xorshift64*: x ^= x >> 12; x ^= x << 25; x ^= x >> 27; return x * 2685821657736338717.

    State is the 64-bit seed (0 is remapped to a fixed odd constant).
    Documented so batch orderings can be reproduced outside this package.
    """

    MASK = (1 << 64) - 1
    MULT = 2685821657736338717

    def __init__(self, seed: int):
        self.state = (int(seed) & self.MASK) or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & self.MASK
        x ^= x >> 27
        self.state = x
        return (x * self.MULT) & self.MASK

    def bounded(self, n: int) -> int:
        """Unbiased draw from [0, n) by rejection."""
        limit = ((1 << 64) // n) * n
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n


def shuffle_batches(
    dataset: LabeledImageSet, batch_size: int, seed: int
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Seeded Fisher-Yates pass over the dataset; the last partial batch is kept."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.arange(n)
    rng = XorShift64Star(seed)
    for i in range(n - 1, 0, -1):
        j = rng.bounded(i + 1)
        order[i], order[j] = order[j], order[i]
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
