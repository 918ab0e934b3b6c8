"""Seeded synthetic SSDA problems and three-part mini-batch sampling."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from aglp._errors import ConfigurationError, ContractError

DATASET_FILE = "dataset.csv"
MANIFEST_FILE = "manifest.yaml"
SPLITS = ("source", "labeled", "unlabeled", "test")


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    encoded = np.zeros((labels.size, num_classes))
    encoded[np.arange(labels.size), labels] = 1.0
    return encoded


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class SsdaDataset:
    """Source S, labeled target L, unlabeled target U, and a held-out target test set.

    ``unlabeled_y`` is the hidden ground truth of U; training never reads it.
    """

    source_x: np.ndarray
    source_y: np.ndarray
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    seed: int

    @property
    def dim(self) -> int:
        return self.source_x.shape[1]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in SPLITS:
            raise ConfigurationError(f"unknown split {name!r}, expected one of {SPLITS}")
        return getattr(self, f"{name}_x"), getattr(self, f"{name}_y")

    def counts(self) -> dict[str, int]:
        return {name: len(self.split(name)[1]) for name in SPLITS}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SsdaDataset):
            return NotImplemented
        arrays_equal = all(
            np.array_equal(a, b)
            for name in SPLITS
            for a, b in zip(self.split(name), other.split(name))
        )
        return arrays_equal and (self.num_classes, self.seed) == (other.num_classes, other.seed)


@dataclass(frozen=True, eq=False)
class Batch:
    """One mini-batch: source block, labeled-target block, and unlabeled views.

    ``view_a``/``view_b`` are two independent augmentations of ``unlabeled_x``.
    """

    source_x: np.ndarray
    source_y: np.ndarray
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    view_a: np.ndarray
    view_b: np.ndarray
    source_labels: np.ndarray
    labeled_labels: np.ndarray

    @property
    def num_source(self) -> int:
        return len(self.source_x)

    @property
    def num_labeled(self) -> int:
        return len(self.labeled_x)

    @property
    def num_unlabeled(self) -> int:
        return len(self.unlabeled_x)

    def stacked(self) -> np.ndarray:
        """All rows in forward order: source, labeled, unlabeled, view a, view b."""
        return np.vstack(
            [self.source_x, self.labeled_x, self.unlabeled_x, self.view_a, self.view_b]
        )


def _class_centers(num_classes: int, dim: int, radius: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def _rotate(points: np.ndarray, degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    rotated = points.copy()
    rotated[:, :2] = points[:, :2] @ rotation.T
    return rotated


def _draw(
    rng: np.random.Generator, centers: np.ndarray, count: int, spread: float
) -> tuple[np.ndarray, np.ndarray]:
    num_classes, dim = centers.shape
    labels = rng.permutation(np.arange(count) % num_classes)
    points = centers[labels] + rng.normal(0.0, spread, size=(count, dim))
    return points, labels


def make_gaussian_shift(
    num_classes: int,
    dim: int,
    n_source: int,
    n_target: int,
    shots: int,
    shift: float,
    rotation: float,
    seed: int,
    *,
    n_test: int = 400,
    radius: float = 2.0,
    spread: float = 0.6,
) -> SsdaDataset:
    """Gaussian class blobs on a circle; the target domain is the source rotated and translated.

    Rotation (degrees) acts about the origin in the first two coordinates, the
    translation is ``shift`` along the unit diagonal. Class identity of each
    blob is kept, so an optimal target classifier exists. ``n_target`` covers
    L and U; the test split is drawn separately.
    """
    if num_classes < 2 or dim < 2:
        raise ConfigurationError(f"need num_classes >= 2 and dim >= 2, got {num_classes}, {dim}")
    if shots < 1:
        raise ConfigurationError(f"shots must be positive, got {shots}")
    if n_target < shots * num_classes:
        raise ConfigurationError(
            f"n_target={n_target} cannot hold {shots} shots for {num_classes} classes"
        )
    if n_source < 1 or n_test < 0:
        raise ConfigurationError("n_source must be positive and n_test non-negative")

    rng = np.random.default_rng(seed)
    source_centers = _class_centers(num_classes, dim, radius)
    target_centers = _rotate(source_centers, rotation) + shift * np.ones(dim) / np.sqrt(dim)

    source_x, source_y = _draw(rng, source_centers, n_source, spread)
    target_x, target_y = _draw(rng, target_centers, n_target, spread)
    test_x, test_y = _draw(rng, target_centers, n_test, spread)

    labeled_index = np.concatenate(
        [np.flatnonzero(target_y == k)[:shots] for k in range(num_classes)]
    )
    unlabeled_mask = np.ones(n_target, dtype=bool)
    unlabeled_mask[labeled_index] = False

    return SsdaDataset(
        source_x=_frozen(source_x),
        source_y=_frozen(source_y),
        labeled_x=_frozen(target_x[labeled_index]),
        labeled_y=_frozen(target_y[labeled_index]),
        unlabeled_x=_frozen(target_x[unlabeled_mask]),
        unlabeled_y=_frozen(target_y[unlabeled_mask]),
        test_x=_frozen(test_x),
        test_y=_frozen(test_y),
        num_classes=num_classes,
        seed=seed,
    )


def augment(
    x: np.ndarray, strength: float, rng: np.random.Generator, *, scaling: bool = True
) -> np.ndarray:
    """Gaussian jitter of scale ``strength`` followed by per-coordinate scaling in [0.9, 1.1]."""
    if strength < 0:
        raise ContractError(f"augmentation strength must be >= 0, got {strength}")
    out = x + rng.normal(0.0, strength, size=x.shape) if strength > 0 else np.array(x, dtype=float)
    if scaling:
        out = out * rng.uniform(0.9, 1.1, size=x.shape)
    return out


def _pick(rng: np.random.Generator, pool: int, count: int, name: str) -> np.ndarray:
    if count > pool:
        raise ConfigurationError(f"batch asks for {count} {name} examples, pool holds {pool}")
    return rng.choice(pool, size=count, replace=False)


def sample_batch(
    dataset: SsdaDataset,
    m_source: int,
    m_labeled: int,
    m_unlabeled: int,
    rng: np.random.Generator,
    *,
    strength: float = 0.1,
) -> Batch:
    """Sample without replacement within the batch; draws come only from ``rng``."""
    source_index = _pick(rng, len(dataset.source_y), m_source, "source")
    labeled_index = _pick(rng, len(dataset.labeled_y), m_labeled, "labeled target")
    unlabeled_index = _pick(rng, len(dataset.unlabeled_x), m_unlabeled, "unlabeled target")

    unlabeled_x = dataset.unlabeled_x[unlabeled_index]
    source_labels = dataset.source_y[source_index]
    labeled_labels = dataset.labeled_y[labeled_index]
    return Batch(
        source_x=_frozen(dataset.source_x[source_index]),
        source_y=_frozen(one_hot(source_labels, dataset.num_classes)),
        labeled_x=_frozen(dataset.labeled_x[labeled_index]),
        labeled_y=_frozen(one_hot(labeled_labels, dataset.num_classes)),
        unlabeled_x=_frozen(unlabeled_x),
        view_a=_frozen(augment(unlabeled_x, strength, rng)),
        view_b=_frozen(augment(unlabeled_x, strength, rng)),
        source_labels=_frozen(source_labels),
        labeled_labels=_frozen(labeled_labels),
    )


def save_dataset(dataset: SsdaDataset, directory: Path, params: dict | None = None) -> None:
    """Write ``dataset.csv`` (split, label or -1, features) and ``manifest.yaml``."""
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / DATASET_FILE, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["split", "label"] + [f"x{i}" for i in range(dataset.dim)])
        for name in SPLITS:
            features, labels = dataset.split(name)
            for row, label in zip(features, labels):
                shown = -1 if name == "unlabeled" else int(label)
                writer.writerow([name, shown] + [repr(float(v)) for v in row])

    counts = dataset.counts()
    manifest = {
        "num_classes": dataset.num_classes,
        "dim": dataset.dim,
        "seed": dataset.seed,
        "counts": counts,
        "unlabeled_truth": [int(label) for label in dataset.unlabeled_y],
        "generation": dict(params or {}),
    }
    with open(directory / MANIFEST_FILE, "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest, f, sort_keys=False)


def load_manifest(directory: Path) -> dict:
    path = directory / MANIFEST_FILE
    if not path.is_file():
        raise ConfigurationError(f"no dataset manifest at {path}")
    with open(path, encoding="utf-8") as f:
        return yaml.safe_load(f)


def load_dataset(directory: Path) -> SsdaDataset:
    manifest = load_manifest(directory)
    features: dict[str, list[list[float]]] = {name: [] for name in SPLITS}
    labels: dict[str, list[int]] = {name: [] for name in SPLITS}
    with open(directory / DATASET_FILE, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        for split, label, *values in reader:
            if split not in features:
                raise ConfigurationError(f"unknown split {split!r} in {directory / DATASET_FILE}")
            features[split].append([float(v) for v in values])
            labels[split].append(int(label))
    labels["unlabeled"] = list(manifest["unlabeled_truth"])

    dim = manifest["dim"]

    def arrays(name: str) -> tuple[np.ndarray, np.ndarray]:
        x = np.array(features[name], dtype=np.float64).reshape(-1, dim)
        return _frozen(x), _frozen(np.array(labels[name], dtype=np.int64))

    source_x, source_y = arrays("source")
    labeled_x, labeled_y = arrays("labeled")
    unlabeled_x, unlabeled_y = arrays("unlabeled")
    test_x, test_y = arrays("test")
    return SsdaDataset(
        source_x=source_x,
        source_y=source_y,
        labeled_x=labeled_x,
        labeled_y=labeled_y,
        unlabeled_x=unlabeled_x,
        unlabeled_y=unlabeled_y,
        test_x=test_x,
        test_y=test_y,
        num_classes=manifest["num_classes"],
        seed=manifest["seed"],
    )
