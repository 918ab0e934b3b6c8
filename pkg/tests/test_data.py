from __future__ import annotations

import numpy as np
import pytest

from aglp._data import (
    augment,
    load_dataset,
    load_manifest,
    make_gaussian_shift,
    one_hot,
    sample_batch,
    save_dataset,
)
from aglp._errors import ConfigurationError


def desk(seed=0, **kwargs):
    params = dict(
        num_classes=4, dim=2, n_source=400, n_target=400, shots=3, shift=1.5, rotation=30.0
    )
    params.update(kwargs)
    return make_gaussian_shift(seed=seed, **params)


def test_same_seed_same_dataset():
    assert desk(seed=5) == desk(seed=5)
    assert desk(seed=5) != desk(seed=6)


def test_three_shots_four_classes_labels_twelve():
    dataset = desk()
    assert len(dataset.labeled_y) == 12
    assert np.bincount(dataset.labeled_y).tolist() == [3, 3, 3, 3]
    assert len(dataset.unlabeled_x) == 400 - 12


def test_zero_shift_domains_share_centers():
    dataset = desk(shift=0.0, rotation=0.0, n_source=4000, n_target=4000)
    for k in range(4):
        source_mean = dataset.source_x[dataset.source_y == k].mean(axis=0)
        target_mean = dataset.unlabeled_x[dataset.unlabeled_y == k].mean(axis=0)
        np.testing.assert_allclose(source_mean, target_mean, atol=0.1)


def test_shift_moves_target_centers():
    dataset = desk(shift=1.5, rotation=0.0, n_source=4000, n_target=4000)
    offset = dataset.unlabeled_x.mean(axis=0) - dataset.source_x.mean(axis=0)
    np.testing.assert_allclose(offset, 1.5 / np.sqrt(2), atol=0.1)


def test_not_enough_targets_for_the_shots():
    with pytest.raises(ConfigurationError):
        desk(n_target=10, shots=3)


def test_dataset_arrays_are_read_only():
    with pytest.raises(ValueError):
        desk().source_x[0, 0] = 1.0


def test_augment_identity_without_noise(rng):
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(augment(x, 0.0, rng, scaling=False), x)


def test_augment_noise_is_centered(rng):
    x = np.zeros((10_000, 2))
    drift = (augment(x, 0.5, rng, scaling=False) - x).mean(axis=0)
    assert np.all(np.abs(drift) < 3 * 0.5 / np.sqrt(10_000))


def test_two_augmented_views_differ(rng):
    x = rng.normal(size=(8, 3))
    first, second = augment(x, 0.1, rng), augment(x, 0.1, rng)
    assert not np.allclose(first, second)
    assert not np.allclose(first, x)


def test_sample_batch_deterministic_under_seed():
    dataset = desk()
    first = sample_batch(dataset, 8, 4, 8, np.random.default_rng(9))
    second = sample_batch(dataset, 8, 4, 8, np.random.default_rng(9))
    np.testing.assert_array_equal(first.stacked(), second.stacked())
    np.testing.assert_array_equal(first.source_labels, second.source_labels)


def test_sample_batch_without_replacement(rng):
    batch = sample_batch(desk(), 12, 12, 12, rng)
    assert len({tuple(row) for row in batch.labeled_x}) == 12
    np.testing.assert_array_equal(batch.labeled_y, one_hot(batch.labeled_labels, 4))
    assert batch.stacked().shape == (12 + 12 + 3 * 12, 2)


def test_sample_batch_empty_unlabeled_block(rng):
    batch = sample_batch(desk(), 4, 4, 0, rng)
    assert batch.num_unlabeled == 0
    assert batch.view_a.shape == (0, 2)


def test_sample_batch_overflow(rng):
    with pytest.raises(ConfigurationError):
        sample_batch(desk(), 4, 13, 4, rng)


def test_save_then_load_round_trips(tmp_path):
    dataset = desk(seed=11)
    save_dataset(dataset, tmp_path, {"seed": 11})
    assert load_dataset(tmp_path) == dataset
    manifest = load_manifest(tmp_path)
    assert manifest["counts"]["labeled"] == 12
    assert manifest["seed"] == 11


def test_unlabeled_rows_hide_their_labels(tmp_path):
    save_dataset(desk(), tmp_path)
    lines = (tmp_path / "dataset.csv").read_text().splitlines()
    unlabeled = [line for line in lines if line.startswith("unlabeled,")]
    assert unlabeled and all(line.split(",")[1] == "-1" for line in unlabeled)


def test_regeneration_is_byte_identical(tmp_path):
    save_dataset(desk(seed=3), tmp_path / "a", {"seed": 3})
    save_dataset(desk(seed=3), tmp_path / "b", {"seed": 3})
    for name in ("dataset.csv", "manifest.yaml"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
