"""
Synthetic image classification data.

One random prototype image per class; samples are the prototype plus
uniform noise, clipped to [0, 1]. Nothing is written to disk: a dataset is
fully determined by (spec, seed, split).
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, Tuple

import numpy as np

from src.exceptions import ConfigError
from src.seeding import stream

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class DatasetSpec:
    num_classes: int = 4
    image_size: int = 16
    channels: int = 3
    samples_per_class: int = 64
    noise: float = 0.3

    def __post_init__(self):
        if self.num_classes < 1 or self.image_size < 1 or self.channels < 1:
            raise ConfigError("dataset num_classes, image_size and channels must be >= 1")
        if self.samples_per_class < 1:
            raise ConfigError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if self.noise < 0:
            raise ConfigError(f"noise level must be >= 0, got {self.noise}")

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.image_size, self.image_size)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (N, C, H, W), float64 in [0, 1]
    labels: np.ndarray  # (N,), int
    spec: DatasetSpec
    seed: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, int]]:
        for image, label in zip(self.images, self.labels):
            yield image, int(label)

    def subset(self, count: int) -> "SyntheticDataset":
        """First `count` samples (the split is already shuffled)."""
        return SyntheticDataset(self.images[:count], self.labels[:count], self.spec, self.seed, self.split)


def class_prototypes(spec: DatasetSpec, seed: int) -> np.ndarray:
    """(num_classes, C, H, W) prototypes, shared by every split of one seed."""
    rng = stream(seed, "dataset", "prototypes")
    return rng.uniform(0.0, 1.0, size=(spec.num_classes,) + spec.image_shape)


def generate_synthetic_dataset(spec: DatasetSpec, seed: int, split: str = "train") -> SyntheticDataset:
    """
    Draw samples_per_class images per class for one split.

    Args:
        spec: generator parameters
        seed: global seed; prototypes depend on it only, samples also on split
        split: train / val / test

    Returns:
        SyntheticDataset with shuffled order
    """
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}, expected one of {SPLITS}")

    prototypes = class_prototypes(spec, seed)
    rng = stream(seed, "dataset", split)

    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    labels = labels[rng.permutation(len(labels))]
    noise = rng.uniform(-spec.noise, spec.noise, size=(len(labels),) + spec.image_shape)
    images = np.clip(prototypes[labels] + noise, 0.0, 1.0)

    logger.debug(f"generated {split} split: {len(labels)} images, noise={spec.noise}")
    return SyntheticDataset(images=images, labels=labels.astype(np.int64), spec=spec, seed=seed, split=split)
