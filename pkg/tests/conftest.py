from __future__ import annotations

import numpy as np
import pytest

from aglp._config import ModelConfig, TrainerConfig
from aglp._data import make_gaussian_shift


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_dataset():
    return make_gaussian_shift(4, 2, 80, 80, 3, 1.5, 30.0, seed=7, n_test=40)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        extractor_hidden=(8,),
        feature_dim=6,
        score_dim=4,
        gcn_hidden=5,
        gcn_out=3,
        gcn_layers=2,
        dropout=0.0,
    )


@pytest.fixture
def quick_trainer() -> TrainerConfig:
    return TrainerConfig(
        steps=30,
        warmup=10,
        update_interval=5,
        eval_every=10,
        checkpoint_every=10,
        batch_source=6,
        batch_labeled=6,
        batch_unlabeled=6,
        topk=3,
        eval_batch_size=64,
        seed=3,
    )
