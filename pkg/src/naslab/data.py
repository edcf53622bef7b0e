"""Dataset ingestion: CIFAR binary files, synthetic stand-ins, deterministic
subsetting, and the deliberately contaminated test set.

Images are float32 [n, 3, H, W] scaled to [0, 1] (byte value v maps to v/255,
no mean subtraction). Every sample carries a provenance tag so mixed sets can
be audited. All subsetting and shuffling is a pure function of (seed, sizes).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, FormatError

TRAIN_ORIGIN = 0
TEST_ORIGIN = 1

_VARIANTS = {
    # variant: (record length, label bytes, class count, coarse class count)
    "cifar10": (3073, 1, 10, None),
    "cifar100": (3074, 2, 100, 20),
}
_PIXELS = 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: np.ndarray
    coarse_labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(
            images=self.images[indices],
            labels=self.labels[indices],
            class_count=self.class_count,
            provenance=self.provenance[indices],
            coarse_labels=None if self.coarse_labels is None else self.coarse_labels[indices],
        )


def _origin_tag(origin: str) -> int:
    if origin == "train":
        return TRAIN_ORIGIN
    if origin == "test":
        return TEST_ORIGIN
    raise ConfigurationError(f"origin must be 'train' or 'test', got {origin!r}")


def load_cifar_binary(path, variant: str, origin: str = "train") -> Dataset:
    """Parse a CIFAR binary file.

    cifar10 records are 3073 bytes (label + 3072 channel-major pixels);
    cifar100 records are 3074 bytes (coarse label, fine label, pixels). Fine
    labels are used as the class labels; coarse labels are kept for lossless
    round-trips.
    """
    if variant not in _VARIANTS:
        raise ConfigurationError(f"variant must be one of {sorted(_VARIANTS)}, got {variant!r}")
    record_len, label_bytes, classes, coarse_classes = _VARIANTS[variant]
    raw = np.fromfile(str(path), dtype=np.uint8)
    if raw.size % record_len:
        offset = (raw.size // record_len) * record_len
        raise FormatError(
            f"{path}: truncated record at byte offset {offset} "
            f"({raw.size} bytes is not a multiple of {record_len})")
    count = raw.size // record_len
    tag = _origin_tag(origin)
    if count == 0:
        warnings.warn(f"{path}: empty dataset file", stacklevel=2)
        return Dataset(
            images=np.zeros((0, 3, 32, 32), dtype=np.float32),
            labels=np.zeros(0, dtype=np.int64),
            class_count=classes,
            provenance=np.zeros(0, dtype=np.uint8),
            coarse_labels=np.zeros(0, dtype=np.int64) if coarse_classes else None,
        )
    records = raw.reshape(count, record_len)
    fine = records[:, label_bytes - 1].astype(np.int64)
    if fine.max() >= classes:
        bad = int(np.argmax(fine >= classes))
        raise FormatError(
            f"{path}: record {bad} has label {fine[bad]} >= class count {classes}")
    coarse = None
    if coarse_classes is not None:
        coarse = records[:, 0].astype(np.int64)
        if coarse.max() >= coarse_classes:
            bad = int(np.argmax(coarse >= coarse_classes))
            raise FormatError(
                f"{path}: record {bad} has coarse label {coarse[bad]} >= {coarse_classes}")
    pixels = records[:, label_bytes:].reshape(count, 3, 32, 32)
    images = (pixels / 255.0).astype(np.float32)
    return Dataset(
        images=images,
        labels=fine,
        class_count=classes,
        provenance=np.full(count, tag, dtype=np.uint8),
        coarse_labels=coarse,
    )


def save_cifar_binary(dataset: Dataset, path, variant: str) -> None:
    """Serialise back to the binary layout; inverse of load_cifar_binary."""
    if variant not in _VARIANTS:
        raise ConfigurationError(f"variant must be one of {sorted(_VARIANTS)}, got {variant!r}")
    record_len, label_bytes, classes, coarse_classes = _VARIANTS[variant]
    if dataset.labels.size and dataset.labels.max() >= classes:
        raise ConfigurationError(
            f"dataset has labels >= {classes}, cannot save as {variant}")
    n = len(dataset)
    records = np.empty((n, record_len), dtype=np.uint8)
    if coarse_classes is not None:
        coarse = dataset.coarse_labels
        records[:, 0] = 0 if coarse is None else coarse.astype(np.uint8)
    records[:, label_bytes - 1] = dataset.labels.astype(np.uint8)
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    records[:, label_bytes:] = pixels.reshape(n, _PIXELS)
    records.tofile(str(path))


def synthetic_dataset(seed: int, count: int, classes: int, size: int = 32,
                      noise: float = 0.05, jitter: float = 0.0,
                      label_noise: float = 0.0, origin: str = "train") -> Dataset:
    """Class-conditional Gaussian-blob images, deterministic in the seed.

    Each class owns a blob position (on a circle) and a channel colour; with
    the default knobs the classes are linearly separable. ``noise`` adds
    per-pixel Gaussian noise, ``jitter`` moves the blob centre per sample,
    and ``label_noise`` reassigns that fraction of labels uniformly -- the
    knobs that make the task hard enough to overfit on. Pixel values are
    quantised to the byte grid so CIFAR-binary round-trips are exact.
    """
    if count < classes:
        raise ConfigurationError(f"count {count} must be >= classes {classes}")
    rng = np.random.default_rng(seed)
    centers = np.empty((classes, 2))
    angles = 2.0 * np.pi * np.arange(classes) / classes
    centers[:, 0] = size / 2.0 + (size / 3.2) * np.cos(angles)
    centers[:, 1] = size / 2.0 + (size / 3.2) * np.sin(angles)
    colors = rng.uniform(0.35, 1.0, size=(classes, 3))
    blob_sigma = size / 6.0

    labels = (np.arange(count) % classes).astype(np.int64)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    images = np.empty((count, 3, size, size), dtype=np.float64)
    offsets = rng.normal(0.0, jitter, size=(count, 2)) if jitter > 0 else np.zeros((count, 2))
    pixel_noise = rng.normal(0.0, noise, size=images.shape) if noise > 0 else 0.0
    for i in range(count):
        c = labels[i]
        cy, cx = centers[c] + offsets[i]
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * blob_sigma ** 2))
        images[i] = colors[c][:, None, None] * blob
    images = np.clip(images + pixel_noise, 0.0, 1.0)
    images = (np.rint(images * 255.0) / 255.0).astype(np.float32)

    if label_noise > 0:
        flip = rng.random(count) < label_noise
        labels = labels.copy()
        labels[flip] = rng.integers(0, classes, size=int(flip.sum()))

    return Dataset(
        images=images,
        labels=labels,
        class_count=classes,
        provenance=np.full(count, _origin_tag(origin), dtype=np.uint8),
    )


def subset(dataset: Dataset, size: int, seed: int) -> Dataset:
    """Seeded subset without replacement."""
    if size > len(dataset):
        raise ConfigurationError(
            f"subset size {size} exceeds dataset size {len(dataset)}")
    rng = np.random.default_rng(seed)
    return dataset.take(rng.permutation(len(dataset))[:size])


def build_contaminated_test_set(train: Dataset, test: Dataset, seed: int,
                                per_side: int | None = None) -> Dataset:
    """Test set that violates the train/test independence assumption: half
    the samples come from the training pool, half from the test pool,
    shuffled deterministically. Provenance tags are preserved for audit."""
    if per_side is None:
        per_side = min(len(train), len(test))
    if per_side <= 0 or per_side > len(train) or per_side > len(test):
        raise ConfigurationError(
            f"need {per_side} samples from each source (train {len(train)}, test {len(test)})")
    if train.class_count != test.class_count:
        raise ConfigurationError("train and test class counts differ")
    rng = np.random.default_rng(seed)
    from_train = train.take(rng.permutation(len(train))[:per_side])
    from_test = test.take(rng.permutation(len(test))[:per_side])
    coarse = None
    if from_train.coarse_labels is not None and from_test.coarse_labels is not None:
        coarse = np.concatenate([from_train.coarse_labels, from_test.coarse_labels])
    provenance = np.concatenate([
        np.full(per_side, TRAIN_ORIGIN, dtype=np.uint8),
        np.full(per_side, TEST_ORIGIN, dtype=np.uint8),
    ])
    mixed = Dataset(
        images=np.concatenate([from_train.images, from_test.images]),
        labels=np.concatenate([from_train.labels, from_test.labels]),
        class_count=train.class_count,
        provenance=provenance,
        coarse_labels=coarse,
    )
    return mixed.take(rng.permutation(len(mixed)))
