"""Pytest configuration and fixtures."""

import numpy as np
import pytest

from mci_probe.config import EncoderConfig, GeneratorConfig
from mci_probe.encoder import encode, init_encoder
from mci_probe.store import FeatureSet
from mci_probe.synthdata import generate_dataset, save_dataset


@pytest.fixture
def rng():
    """Seeded generator for test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_encoder_config():
    """16x16 images in 4x4 patches: N = 16 tokens per channel, D = 16."""
    return EncoderConfig(image_size=16, patch_size=4, embed_dim=16, depth=2, heads=2)


@pytest.fixture
def small_weights(small_encoder_config):
    return init_encoder(small_encoder_config)


@pytest.fixture
def small_generator_config():
    return GeneratorConfig(channels=3, image_size=16, num_classes=4, n_train=40, n_val=20, n_test=20)


@pytest.fixture
def dataset_dir(tmp_path, small_generator_config):
    """A saved synthetic dataset directory."""
    directory = tmp_path / "data"
    save_dataset(generate_dataset(small_generator_config), directory)
    return directory


def make_feature_set(rng, mode="ife", samples=32, channels=3, tokens=4, dim=8, classes=2, signal=1.0):
    """Random features whose channel-0 mean along dim 0 carries the label."""
    labels = np.arange(samples) % classes
    patches = rng.normal(scale=0.1, size=(samples, channels, tokens, dim))
    patches[:, 0, :, 0] += signal * (2.0 * labels[:, None] - (classes - 1))
    cls_rows = 1 if mode == "jfe" else channels
    cls = rng.normal(size=(samples, cls_rows, dim))
    return FeatureSet(mode, patches, cls, labels)


def encode_images(images, weights, mode):
    return [encode(image, weights, mode) for image in images]
