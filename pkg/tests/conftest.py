"""Pytest configuration and shared fixtures."""

import numpy as np
import pytest
import torch

from protoprompt.config import load_config
from protoprompt.dataspec import default_split, generate_toy_dataset
from protoprompt.models import ToyDatasetSpec
from protoprompt.trainer import meta_train

TINY_OVERRIDES = [
    "iterations=2",
    "decay_step=1",
    "batch_size=1",
    "way=2",
    "shot=2",
    "queries_per_episode=1",
    "log_every=1",
    "model.visual_channels=8",
    "model.text_channels=8",
    "model.text_layers=1",
    "model.text_heads=2",
    "model.top_n_train=8",
    "model.top_n_test=10",
    "mpg.prompt_len=4",
    "mpg.hidden_dim=16",
    "loss.rpn_samples=16",
    "loss.rcnn_samples=16",
    "data.toy.num_classes=6",
    "data.toy.num_images=40",
    "data.test_images=12",
    "data.num_novel=2",
    "eval.shots=[1]",
    "eval.seeds=[0]",
    "eval.max_images=4",
    "finetune.iterations=2",
    "finetune.decay_step=1",
]


@pytest.fixture(autouse=True)
def torch_single_thread():
    """Keep float results independent of the thread count."""
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)


@pytest.fixture
def tiny_config():
    """A run config small enough to train for a couple of iterations in a test."""
    return load_config(None, TINY_OVERRIDES)


@pytest.fixture(scope="session")
def toy_dataset():
    """Six-class toy dataset shared by the read-only tests."""
    spec = ToyDatasetSpec(num_classes=6, num_images=40, seed=0)
    return generate_toy_dataset(spec, np.random.default_rng(0))


@pytest.fixture(scope="session")
def toy_split(toy_dataset):
    """Classes 3 and 6 are novel."""
    return default_split(toy_dataset.class_ids(), num_novel=2)


@pytest.fixture(scope="session")
def meta_checkpoint(toy_dataset, toy_split):
    """Checkpoint of a two-iteration meta-training run on the toy data."""
    config = load_config(None, TINY_OVERRIDES)
    return meta_train(toy_dataset, toy_split, config, np.random.default_rng(config.seed))
