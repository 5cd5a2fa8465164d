"""
Tests for the synthetic dataset, toy training and checkpoints
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from src.dataset import DatasetSpec, class_prototypes, generate_synthetic_dataset
from src.exceptions import CheckpointError, ConfigError
from src.seeding import derive_seed, stream
from src.training import TrainSettings, accuracy, initial_model, train_toy
from src.vit import ViTConfig, ViTModel

TINY = ViTConfig(image_size=8, channels=1, patch_size=4, d_model=8, depth=1, heads=2, mlp_hidden=8, num_classes=2)
TINY_DATA = DatasetSpec(num_classes=2, image_size=8, channels=1, samples_per_class=6, noise=0.1)


class TestSeeding:
    """Named sub-streams"""

    def test_same_keys_same_stream(self):
        assert derive_seed(7, "attack", 3) == derive_seed(7, "attack", 3)
        assert np.array_equal(stream(7, "x").normal(size=4), stream(7, "x").normal(size=4))

    def test_different_keys_differ(self):
        assert derive_seed(7, "attack") != derive_seed(7, "init")
        assert derive_seed(7, "attack") != derive_seed(8, "attack")


class TestSyntheticDataset:
    """Prototype-plus-noise data"""

    def test_zero_noise_equals_prototype(self):
        spec = DatasetSpec(num_classes=3, image_size=4, channels=2, samples_per_class=2, noise=0.0)
        dataset = generate_synthetic_dataset(spec, seed=1)
        prototypes = class_prototypes(spec, seed=1)
        for image, label in dataset:
            assert np.array_equal(image, prototypes[label])

    def test_pixels_in_unit_range_and_balanced(self):
        spec = DatasetSpec(samples_per_class=5, noise=0.8)
        dataset = generate_synthetic_dataset(spec, seed=2, split="test")
        assert len(dataset) == 20
        assert dataset.images.min() >= 0.0 and dataset.images.max() <= 1.0
        assert np.bincount(dataset.labels).tolist() == [5, 5, 5, 5]

    def test_splits_share_prototypes_but_not_samples(self):
        train = generate_synthetic_dataset(TINY_DATA, seed=3, split="train")
        test = generate_synthetic_dataset(TINY_DATA, seed=3, split="test")
        assert not np.array_equal(train.images, test.images)

    def test_deterministic(self):
        a = generate_synthetic_dataset(TINY_DATA, seed=4)
        b = generate_synthetic_dataset(TINY_DATA, seed=4)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_unknown_split(self):
        with pytest.raises(ConfigError):
            generate_synthetic_dataset(TINY_DATA, seed=0, split="holdout")

    def test_negative_noise(self):
        with pytest.raises(ConfigError):
            DatasetSpec(noise=-0.1)

    def test_subset(self):
        dataset = generate_synthetic_dataset(TINY_DATA, seed=0)
        assert len(dataset.subset(3)) == 3


class TestTraining:
    """Mini-batch SGD"""

    def test_zero_learning_rate_keeps_initial_weights(self):
        dataset = generate_synthetic_dataset(TINY_DATA, seed=0)
        model = train_toy(TINY, dataset, epochs=1, lr=0.0, seed=9, batch_size=4)
        init = initial_model(TINY, 9)
        for name in init.params:
            assert np.array_equal(model.params[name], init.params[name])

    def test_same_seed_same_weights(self):
        dataset = generate_synthetic_dataset(TINY_DATA, seed=0)
        a = train_toy(TINY, dataset, epochs=2, lr=0.1, seed=5, batch_size=4)
        b = train_toy(TINY, dataset, epochs=2, lr=0.1, seed=5, batch_size=4)
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name])
        assert a.info.final_loss == b.info.final_loss
        assert a.info.epochs == 2

    def test_loss_decreases_on_separable_data(self):
        dataset = generate_synthetic_dataset(TINY_DATA, seed=1)
        one = train_toy(TINY, dataset, epochs=1, lr=0.1, seed=2, batch_size=4)
        many = train_toy(TINY, dataset, epochs=15, lr=0.1, seed=2, batch_size=4)
        assert many.info.final_loss < one.info.final_loss

    def test_image_shape_mismatch(self):
        dataset = generate_synthetic_dataset(DatasetSpec(num_classes=2, image_size=4, channels=1,
                                                         samples_per_class=2), seed=0)
        with pytest.raises(ConfigError):
            train_toy(TINY, dataset, epochs=1, lr=0.1, seed=0)

    def test_settings_validation(self):
        with pytest.raises(ConfigError):
            TrainSettings(batch_size=0)
        with pytest.raises(ConfigError):
            TrainSettings(lr=-1.0)

    def test_accuracy_of_empty_dataset(self):
        dataset = generate_synthetic_dataset(TINY_DATA, seed=0).subset(0)
        assert accuracy(initial_model(TINY, 0), dataset) == 0.0


class TestCheckpoint:
    """JSON checkpoints"""

    def test_save_load_save_is_byte_identical(self, tmp_path):
        model = ViTModel.initialize(TINY, seed=6)
        model.info.dataset = {"seed": 6, "train": TINY_DATA.to_dict(), "test": TINY_DATA.to_dict()}
        first = save_checkpoint(model, tmp_path / "a.json")
        loaded = load_checkpoint(first)
        second = save_checkpoint(loaded, tmp_path / "b.json")
        assert first.read_bytes() == second.read_bytes()
        for name in model.params:
            assert np.array_equal(loaded.params[name], model.params[name])
        assert loaded.info.dataset["seed"] == 6

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.json")

    def test_truncated_file(self, tmp_path):
        path = save_checkpoint(ViTModel.initialize(TINY, seed=0), tmp_path / "model.json")
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = save_checkpoint(ViTModel.initialize(TINY, seed=0), tmp_path / "model.json")
        path.write_text(path.read_text().replace(f'"version":{FORMAT_VERSION}', '"version":99'))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_wrong_parameter_shape(self, tmp_path):
        path = save_checkpoint(ViTModel.initialize(TINY, seed=0), tmp_path / "model.json")
        path.write_text(path.read_text().replace('"shape":[2]', '"shape":[1,2]', 1))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
