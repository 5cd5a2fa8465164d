"""
Plain mini-batch SGD on cross-entropy for the toy ViT.

Fully seed-deterministic: initialization and batch shuffling draw from
named sub-streams of the training seed.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.dataset import SyntheticDataset
from src.exceptions import ConfigError, TrainingError
from src.logging_config import get_training_logger, log_execution_time
from src.losses import cross_entropy
from src.seeding import derive_seed, stream
from src.tensor import Tape
from src.vit import TrainingInfo, ViTConfig, ViTModel, forward, predict

logger = logging.getLogger(__name__)


@dataclass
class TrainSettings:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def accuracy(model: ViTModel, dataset: SyntheticDataset) -> float:
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict(model, dataset.images) == dataset.labels))


def initial_model(config: ViTConfig, seed: int) -> ViTModel:
    """Weights before any update; the same draw train_toy starts from."""
    return ViTModel.initialize(config, derive_seed(seed, "init"))


def sgd_step(model: ViTModel, images: np.ndarray, labels: np.ndarray, lr: float) -> float:
    """One gradient step in place; returns the batch loss before the update."""
    tape = Tape()
    params = model.tensors(tape)
    logits, _ = forward(model, images, params=params)
    loss = cross_entropy(logits, labels)
    grads = tape.backward(loss)
    for name, leaf in params.items():
        model.params[name] = model.params[name] - lr * grads[leaf].data
    return loss.item()


@log_execution_time(label="training")
def train_toy(
    config: ViTConfig,
    dataset: SyntheticDataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    val_dataset: Optional[SyntheticDataset] = None
) -> ViTModel:
    """
    Train a fresh toy ViT.

    Args:
        config: architecture
        dataset: training split
        epochs: passes over the data
        lr: SGD learning rate (0 leaves the weights untouched)
        seed: training seed
        batch_size: mini-batch size
        val_dataset: optional split reported each epoch

    Returns:
        Trained model with TrainingInfo filled in

    Raises:
        ConfigError: empty dataset or images not matching the config
        TrainingError: loss became non-finite
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if dataset.images.shape[1:] != config.image_shape:
        raise ConfigError(f"dataset images {dataset.images.shape[1:]} do not match model input {config.image_shape}")
    if dataset.labels.max() >= config.num_classes:
        raise ConfigError(f"dataset has labels >= num_classes={config.num_classes}")

    settings = TrainSettings(epochs=epochs, lr=lr, batch_size=batch_size)
    model = initial_model(config, seed)
    shuffler = stream(seed, "shuffle")
    training_logger = get_training_logger()
    epoch_loss = float("nan")

    logger.info(f"🚀 training toy ViT: {len(dataset)} images, {epochs} epochs, lr={lr}, batch={batch_size}")

    for epoch in range(1, settings.epochs + 1):
        order = shuffler.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), settings.batch_size):
            batch = order[start:start + settings.batch_size]
            batch_loss = sgd_step(model, dataset.images[batch], dataset.labels[batch], settings.lr)
            if not np.isfinite(batch_loss):
                raise TrainingError(f"loss became {batch_loss}", epoch)
            losses.append(batch_loss * len(batch))
        epoch_loss = float(np.sum(losses) / len(dataset))

        train_acc = accuracy(model, dataset)
        val_acc = accuracy(model, val_dataset) if val_dataset is not None else None
        training_logger.log_epoch(epoch, epoch_loss, train_acc, val_acc)

    model.info = TrainingInfo(
        seed=seed,
        train_accuracy=accuracy(model, dataset),
        val_accuracy=accuracy(model, val_dataset) if val_dataset is not None else None,
        epochs=settings.epochs,
        lr=settings.lr,
        final_loss=epoch_loss if settings.epochs else None,
    )
    logger.info(f"✅ training done: train_acc={model.info.train_accuracy:.3f}")
    return model
