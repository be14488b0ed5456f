"""CIFAR-10 binary ingestion, noisy variants, and deterministic batching.

The on-disk format is the dataset's own binary layout: records of 3073 bytes,
one label byte followed by 3072 channel-major pixel bytes (red plane, green
plane, blue plane, each 32x32 row-major).  Pixels are scaled to [0, 1] on
load.  Noise is added once per dataset (a fixed corrupted variant, not fresh
per epoch) and is deliberately not clipped.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .shuffle import apply_shuffle, permutation_from_seed

TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10


@dataclass
class Dataset:
    """Images (count, 3, 32, 32) in [0, 1]-ish reals plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    provenance: str = "clean"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        if not np.all(np.isfinite(self.images)):
            raise ValueError("images contain non-finite pixels")

    def __len__(self):
        return len(self.labels)


def decode_records(raw: bytes, dtype=np.float32):
    """Parse raw record bytes into (images, labels)."""
    if len(raw) % RECORD_BYTES != 0:
        raise ValueError(
            f"file length {len(raw)} is not a multiple of {RECORD_BYTES}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= NUM_CLASSES:
        bad = int(labels.max())
        raise ValueError(f"label byte {bad} out of range [0, {NUM_CLASSES})")
    images = rec[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(dtype) / dtype(255)
    return images, labels


def encode_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`decode_records`; pixels re-quantized to bytes by
    clamped rounding (values outside [0, 1] saturate)."""
    n = len(labels)
    rec = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = labels.astype(np.uint8)
    pix = np.clip(np.rint(images.astype(np.float64) * 255.0), 0, 255)
    rec[:, 1:] = pix.reshape(n, -1).astype(np.uint8)
    return rec.tobytes()


def _read_file(path, dtype):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing dataset file {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return decode_records(raw, dtype)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def load_cifar10(directory, dtype=np.float32) -> tuple[Dataset, Dataset]:
    """Load the five training batch files and the test batch file."""
    train_parts = [_read_file(os.path.join(directory, f), dtype) for f in TRAIN_FILES]
    train = Dataset(
        images=np.concatenate([p[0] for p in train_parts]),
        labels=np.concatenate([p[1] for p in train_parts]),
    )
    test_images, test_labels = _read_file(os.path.join(directory, TEST_FILE), dtype)
    return train, Dataset(images=test_images, labels=test_labels)


def save_cifar10(train: Dataset, test: Dataset, directory) -> None:
    """Write datasets back out in the binary record layout (train split into
    the five standard batch files)."""
    os.makedirs(directory, exist_ok=True)
    img_parts = np.array_split(train.images, len(TRAIN_FILES))
    lab_parts = np.array_split(train.labels, len(TRAIN_FILES))
    for fname, imgs, labs in zip(TRAIN_FILES, img_parts, lab_parts):
        with open(os.path.join(directory, fname), "wb") as fh:
            fh.write(encode_records(imgs, labs))
    with open(os.path.join(directory, TEST_FILE), "wb") as fh:
        fh.write(encode_records(test.images, test.labels))


def add_awgn(ds: Dataset, dev: float, seed: int) -> Dataset:
    """A fixed white-Gaussian-noise corrupted variant (per-pixel N(0, dev^2),
    added once, unclipped)."""
    if dev < 0:
        raise ValueError(f"noise deviation must be >= 0, got {dev}")
    if dev == 0:
        return replace(ds, images=ds.images.copy(), labels=ds.labels.copy(),
                       provenance=ds.provenance)
    rng = np.random.default_rng(int(seed) & ((1 << 64) - 1))
    noise = rng.normal(0.0, dev, size=ds.images.shape).astype(ds.images.dtype)
    return Dataset(images=ds.images + noise, labels=ds.labels.copy(),
                   provenance=f"awgn(dev={dev}, seed={int(seed)})")


def subset_per_class(ds: Dataset, per_class: int) -> Dataset:
    """First ``per_class`` examples of each class, original order preserved."""
    keep = []
    for c in range(NUM_CLASSES):
        idx = np.nonzero(ds.labels == c)[0][:per_class]
        if idx.size < per_class:
            raise ValueError(
                f"class {c} has only {idx.size} examples, need {per_class}"
            )
        keep.append(idx)
    order = np.sort(np.concatenate(keep))
    return Dataset(images=ds.images[order], labels=ds.labels[order],
                   provenance=ds.provenance)


def batches(ds: Dataset, batch_size: int, epoch_seed: int):
    """Yield (images, labels) batches in a seeded shuffled order.

    The example order is one uniformly drawn permutation per epoch;
    the final short batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    n = len(ds)
    order = apply_shuffle(permutation_from_seed(n, epoch_seed), np.arange(n))
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]
