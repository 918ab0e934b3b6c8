"""Seeded multi-run experiments on the standard desk dataset. Run with ``pytest -m slow``."""
from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from aglp._config import DatasetParams, ModelConfig, TrainerConfig, apply_preset
from aglp._trainer import run

SEEDS = range(5)


def mean_accuracies(preset: str, params: DatasetParams) -> tuple[float, float]:
    target, source = [], []
    for seed in SEEDS:
        dataset = dataclasses.replace(params, seed=seed).build()
        config = dataclasses.replace(apply_preset(TrainerConfig(), preset), seed=seed)
        final = run(config, dataset, ModelConfig()).final
        target.append(final.target_accuracy)
        source.append(final.source_accuracy)
    return float(np.mean(target)), float(np.mean(source))


@pytest.mark.slow
def test_full_model_beats_every_ablation():
    params = DatasetParams()
    target = {name: mean_accuracies(name, params)[0] for name in ("st", "saa", "ca", "full")}
    assert target["full"] >= target["st"] + 0.05
    assert target["full"] >= target["saa"]
    assert target["full"] >= target["ca"]


@pytest.mark.slow
@pytest.mark.parametrize("preset", ["st", "full"])
def test_no_gain_without_a_shift(preset):
    target, source = mean_accuracies(preset, DatasetParams(shift=0.0, rotation=0.0))
    assert abs(target - source) <= 0.02
