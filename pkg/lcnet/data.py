"""Datasets: CIFAR-10 binary ingestion, a synthetic corpus, batching and augmentation."""

from __future__ import annotations

import logging
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .config import DataConfig
from .const import (
    CIFAR10_CHANNELS,
    CIFAR10_CLASS_NAMES,
    CIFAR10_IMAGE_SIZE,
    CIFAR10_META_FILE,
    CIFAR10_NUM_CLASSES,
    CIFAR10_RECORD_BYTES,
    CIFAR10_TEST_FILES,
    CIFAR10_TRAIN_FILES,
    CROP_PADDING,
    DEFAULT_DTYPE,
    MAX_SYNTHETIC_CLASSES,
    DataSource,
    Split,
)
from .errors import DataError

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel mean and standard deviation of [0, 1]-scaled pixels."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def compute(cls, images: np.ndarray) -> NormalizationStats:
        """Measure the statistics of an (N, C, H, W) array in [0, 1]."""
        if len(images) == 0:
            raise DataError("Cannot compute normalization statistics of an empty split")
        mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
        std = images.std(axis=(0, 2, 3), dtype=np.float64)
        std = np.where(std > 0, std, 1.0)
        return cls(tuple(float(v) for v in mean), tuple(float(v) for v in std))

    def apply(self, images: np.ndarray) -> np.ndarray:
        """Normalize an (N, C, H, W) array."""
        mean = np.asarray(self.mean, dtype=images.dtype).reshape(1, -1, 1, 1)
        std = np.asarray(self.std, dtype=images.dtype).reshape(1, -1, 1, 1)
        return ((images - mean) / std).astype(images.dtype)

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for storage."""
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> NormalizationStats:
        """Create from dictionary."""
        return cls(tuple(data["mean"]), tuple(data["std"]))


@dataclass
class Dataset:
    """Images (N, C, H, W), integer labels and class names."""

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    stats: NormalizationStats | None = None

    def __len__(self) -> int:
        """Return the number of instances."""
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        """Return the number of classes."""
        return len(self.class_names)

    def validate(self) -> list[str]:
        """Validate the dataset and return a list of errors."""
        errors = []
        if self.images.ndim != 4:
            errors.append(f"Images must be (N, C, H, W), got shape {self.images.shape}")
        elif len(self.images) != len(self.labels):
            errors.append(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            errors.append(f"Labels must lie in [0, {self.num_classes})")
        return errors

    def subset(self, count: int | None) -> Dataset:
        """Return the first ``count`` instances (all when None)."""
        if count is None or count >= len(self):
            return self
        return Dataset(self.images[:count], self.labels[:count], self.class_names, self.stats)


def _read_class_names(directory: Path) -> tuple[str, ...]:
    meta = directory / CIFAR10_META_FILE
    if not meta.is_file():
        return CIFAR10_CLASS_NAMES
    names = tuple(line.strip() for line in meta.read_text().splitlines() if line.strip())
    if len(names) != CIFAR10_NUM_CLASSES:
        _LOGGER.warning("Ignoring %s with %d names", meta, len(names))
        return CIFAR10_CLASS_NAMES
    return names


def _read_records(file: Path, limit: int | None) -> tuple[np.ndarray, np.ndarray]:
    if not file.is_file():
        raise DataError(f"Missing CIFAR-10 file: {file}")
    raw = np.fromfile(file, dtype=np.uint8)
    complete = raw.size // CIFAR10_RECORD_BYTES
    if raw.size % CIFAR10_RECORD_BYTES:
        raise DataError(
            f"{file.name}: truncated record at byte offset {complete * CIFAR10_RECORD_BYTES} "
            f"(file is {raw.size} bytes, records are {CIFAR10_RECORD_BYTES})"
        )
    if limit is not None:
        complete = min(complete, limit)
    records = raw[: complete * CIFAR10_RECORD_BYTES].reshape(complete, CIFAR10_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR10_NUM_CLASSES)
    if bad.size:
        index = int(bad[0])
        raise DataError(
            f"{file.name}: label byte {labels[index]} > 9 in record {index} "
            f"(byte offset {index * CIFAR10_RECORD_BYTES})"
        )
    pixels = records[:, 1:].reshape(
        complete, CIFAR10_CHANNELS, CIFAR10_IMAGE_SIZE, CIFAR10_IMAGE_SIZE
    )
    return pixels, labels


def load_cifar10(
    path: str | Path,
    split: Split,
    stats: NormalizationStats | None = None,
    normalize: bool = True,
    limit: int | None = None,
) -> Dataset:
    """Load one split of the CIFAR-10 binary distribution.

    Args:
        path: Directory holding ``data_batch_*.bin`` and ``test_batch.bin``
        split: Which split to read
        stats: Normalization statistics; computed from the loaded images when None
        normalize: Return [0, 1]-scaled pixels without normalization when False
        limit: Keep only the first ``limit`` records, in file order

    Returns:
        The dataset in file order

    Raises:
        DataError: If a file is missing, truncated or holds a label byte above 9
    """
    directory = Path(path)
    files = CIFAR10_TRAIN_FILES if split == Split.TRAIN else CIFAR10_TEST_FILES
    pixel_parts, label_parts = [], []
    remaining = limit
    for name in files:
        if remaining is not None and remaining <= 0:
            break
        pixels, labels = _read_records(directory / name, remaining)
        pixel_parts.append(pixels)
        label_parts.append(labels)
        if remaining is not None:
            remaining -= len(labels)
    images = (np.concatenate(pixel_parts) / 255.0).astype(DEFAULT_DTYPE)
    labels = np.concatenate(label_parts)
    if normalize:
        if stats is None:
            stats = NormalizationStats.compute(images)
        images = stats.apply(images)
    _LOGGER.info("Loaded %d CIFAR-10 %s instances from %s", len(labels), split, directory)
    return Dataset(images, labels, _read_class_names(directory), stats if normalize else None)


def _class_colour(label: int, classes: int) -> np.ndarray:
    angle = 2 * np.pi * label / classes
    return 0.5 + 0.35 * np.cos(angle + 2 * np.pi * np.arange(CIFAR10_CHANNELS) / 3)


def make_synthetic(
    classes: int,
    n: int,
    seed: int,
    image_size: int = CIFAR10_IMAGE_SIZE,
    stats: NormalizationStats | None = None,
) -> Dataset:
    """Procedurally generated oriented gratings, one family per class.

    Class k has its own orientation, spatial frequency and colour; each instance
    draws a random phase, contrast and pixel noise. Generation is deterministic
    given the seed.
    """
    if not 1 <= classes <= MAX_SYNTHETIC_CLASSES:
        raise ValueError(f"Synthetic classes must be in [1, {MAX_SYNTHETIC_CLASSES}]")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    coords = np.arange(image_size, dtype=np.float64) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    images = np.empty((n, CIFAR10_CHANNELS, image_size, image_size), dtype=DEFAULT_DTYPE)
    for index, label in enumerate(labels):
        theta = np.pi * label / classes
        frequency = 2.0 + 1.5 * label
        phase = rng.uniform(0, 2 * np.pi)
        contrast = rng.uniform(0.7, 1.0)
        wave = np.sin(2 * np.pi * frequency * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        grating = 0.5 + 0.5 * contrast * wave
        colour = _class_colour(int(label), classes).reshape(-1, 1, 1)
        noise = rng.normal(0.0, 0.05, size=(CIFAR10_CHANNELS, image_size, image_size))
        images[index] = np.clip(colour * grating + noise, 0.0, 1.0)
    if n and stats is None:
        stats = NormalizationStats.compute(images)
    if stats is not None and n:
        images = stats.apply(images)
    names = tuple(f"pattern_{k}" for k in range(classes))
    return Dataset(images, labels, names, stats)


def load_datasets(
    config: DataConfig, seed: int, stats: NormalizationStats | None = None
) -> tuple[Dataset, Dataset]:
    """Load the train and test splits named by ``config``.

    Both splits are normalized with the train split's statistics unless
    ``stats`` (typically read from a checkpoint) is given.
    """
    if config.source == DataSource.CIFAR10:
        if config.path is None:
            raise DataError("CIFAR-10 source requires a data path")
        train = load_cifar10(config.path, Split.TRAIN, stats, limit=config.train_subset)
        test = load_cifar10(config.path, Split.TEST, train.stats, limit=config.test_subset)
        return train, test
    train = make_synthetic(
        config.synthetic_classes, config.synthetic_train, seed, config.image_size, stats
    )
    test = make_synthetic(
        config.synthetic_classes,
        config.synthetic_test,
        seed + 1,
        config.image_size,
        train.stats,
    )
    return train.subset(config.train_subset), test.subset(config.test_subset)


class BatchIterator:
    """Deterministic mini-batches with optional pad-and-crop and flip augmentation."""

    def __init__(
        self,
        dataset: Dataset,
        batch_size: int,
        seed: int,
        shuffle: bool = True,
        augment_crop: bool = False,
        augment_flip: bool = False,
    ) -> None:
        """Initialize the iterator."""
        if batch_size < 1:
            raise ValueError(f"Batch size must be positive, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.augment_crop = augment_crop
        self.augment_flip = augment_flip

    def __len__(self) -> int:
        """Return the number of batches per epoch."""
        return -(-len(self.dataset) // self.batch_size)

    def epoch(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield the batches of one epoch; identical for identical (seed, epoch)."""
        if len(self.dataset) == 0:
            raise DataError("Dataset is empty, no batches to draw")
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.dataset)) if self.shuffle else np.arange(len(self.dataset))
        for start in range(0, len(order), self.batch_size):
            index = order[start : start + self.batch_size]
            images = self.dataset.images[index]
            if self.augment_crop:
                images = _random_crop(images, rng)
            if self.augment_flip:
                images = _random_flip(images, rng)
            yield np.ascontiguousarray(images), self.dataset.labels[index]


def _random_crop(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n, _, h, w = images.shape
    padded = np.pad(
        images, ((0, 0), (0, 0), (CROP_PADDING, CROP_PADDING), (CROP_PADDING, CROP_PADDING))
    )
    offsets = rng.integers(0, 2 * CROP_PADDING + 1, size=(n, 2))
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out


def _random_flip(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(len(images)) < 0.5
    out = images.copy()
    out[flip] = out[flip, :, :, ::-1]
    return out
