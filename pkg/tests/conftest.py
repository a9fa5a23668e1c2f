"""Shared fixtures: a tiny network config and small synthetic scenes."""

from pathlib import Path

import numpy as np
import pytest

from src.config import DataConfig, TrainingConfig
from src.data_pipeline import (DatasetSplit, ImagePair, MisalignmentSpec, RawImage, generate_synthetic_scene,
                               inject_misalignment, write_synthetic_corpus)
from src.trainer import tiny_architecture
from src.utils import derive_seed

REPO_ROOT = Path(__file__).resolve().parent.parent
CONFIG_DIR = REPO_ROOT / 'configs'
TINY_SIZE = 32


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def make_pair(rng: np.random.Generator, h: int = TINY_SIZE, w: int = TINY_SIZE, stem: str = None) -> ImagePair:
    """Random aligned pair with values in [0, 1]."""
    return ImagePair(
        visual=RawImage(rng.random((h, w, 3))),
        thermal=RawImage(rng.random((h, w, 1))),
        aligned_flag=True,
        stem=stem,
    )


def make_scenes(count: int, size: int = TINY_SIZE, seed: int = 0):
    """Synthetic scenes with a small thermal shift, named like a corpus on disk."""
    pairs = []
    for index in range(count):
        pair, _ = generate_synthetic_scene(derive_seed(seed, index), size, size, 2)
        pair = inject_misalignment(pair, MisalignmentSpec(translation=(2.0, 1.0)), derive_seed(seed, index + 100))
        pair.stem = f"scene_{index:04d}"
        pairs.append(pair)
    return pairs


@pytest.fixture
def tiny_config():
    return TrainingConfig(
        epochs=2,
        batch_size=4,
        resolution=(TINY_SIZE, TINY_SIZE),
        architecture=tiny_architecture(),
        data=DataConfig(dataset_dir='unused', train_ratio=0.75),
        kl_bins=16,
        log_every=0,
    ).validate()


@pytest.fixture
def scenes():
    return make_scenes(8)


@pytest.fixture
def train_only_split(scenes):
    """All 8 scenes for training, no validation."""
    return DatasetSplit(train=list(scenes), val=[], seed=0)


@pytest.fixture
def small_split(scenes):
    return DatasetSplit(train=list(scenes[:6]), val=list(scenes[6:]), seed=0)


@pytest.fixture
def corpus_dir(tmp_path):
    directory = tmp_path / 'corpus'
    write_synthetic_corpus(str(directory), 6, TINY_SIZE, TINY_SIZE, 2,
                           MisalignmentSpec(translation=(2.0, 1.0)), seed=3)
    return directory
