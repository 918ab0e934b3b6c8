"""Labeled cross-entropy, adaptive clustering, pseudo-labeling, consistency and centroid losses."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from aglp._errors import ContractError, DimensionError
from aglp._tensor import (
    Tensor,
    apply_mask,
    as_tensor,
    detach,
    log,
    matmul,
    masked_row_mean,
    sub,
    topk_indices,
    total,
    transpose,
)

logger = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"


def _zero() -> Tensor:
    return Tensor(0.0)


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def cross_entropy(probabilities: Tensor, targets: Tensor | np.ndarray) -> Tensor:
    """Mean over rows of -sum_k y_k log p_k. Targets may be one-hot or soft."""
    targets = as_tensor(targets)
    _same_shape(probabilities, targets, "cross_entropy")
    rows = probabilities.shape[0]
    if rows == 0:
        return _zero()
    return total(targets * log(probabilities)) * (-1.0 / rows)


def pairwise_pseudo_labels(features: Tensor | np.ndarray, k: int) -> np.ndarray:
    """s_ij = 1 iff rows i and j share the same unordered set of top-k coordinates."""
    ranked = np.sort(topk_indices(features, k), axis=1)
    same = (ranked[:, None, :] == ranked[None, :, :]).all(axis=2)
    return same.astype(np.float64)


def aac_loss(raw: Tensor, augmented: Tensor, similar: np.ndarray) -> Tensor:
    """Pairwise clustering loss between raw-view row i and augmented-view row j.

    Inner products enter the logs clamped to [1e-12, 1 - 1e-12]; normalized by M^2.
    """
    _same_shape(raw, augmented, "aac_loss")
    m = raw.shape[0]
    if similar.shape != (m, m):
        raise DimensionError(f"aac_loss: similarity matrix {similar.shape} for {m} rows")
    if m == 0:
        return _zero()
    inner = matmul(raw, transpose(augmented))
    similar_t = Tensor(similar)
    attract = similar_t * log(inner)
    repel = (1.0 - similar_t) * log(1.0 - inner)
    return total(attract + repel) * (-1.0 / (m * m))


def pl_loss(raw: Tensor, strong: Tensor, tau: float) -> Tensor:
    """Cross-entropy of ``strong`` against argmax(raw), over rows with max(raw) >= tau.

    ``raw`` is detached; the mean runs over retained rows only.
    """
    _same_shape(raw, strong, "pl_loss")
    confidence = raw.values.max(axis=1) if raw.shape[0] else np.zeros(0)
    retained = confidence >= tau
    count = int(retained.sum())
    if count == 0:
        return _zero()
    targets = np.zeros(raw.shape)
    targets[np.flatnonzero(retained), np.argmax(raw.values[retained], axis=1)] = 1.0
    masked = apply_mask(log(strong), targets)
    return total(masked) * (-1.0 / count)


@dataclass(frozen=True)
class RampSchedule:
    """w(t) = nu * exp(-5 (1 - t/T)^2) for t < T, and nu afterwards."""

    coefficient: float
    total_steps: int
    step: int = 0

    @property
    def weight(self) -> float:
        if self.total_steps <= 0 or self.step >= self.total_steps:
            return self.coefficient
        progress = max(self.step, 0) / self.total_steps
        return self.coefficient * math.exp(-5.0 * (1.0 - progress) ** 2)

    def at(self, step: int) -> RampSchedule:
        return replace(self, step=step)


def consistency_loss(first: Tensor, second: Tensor, schedule: RampSchedule) -> Tensor:
    _same_shape(first, second, "consistency_loss")
    m = first.shape[0]
    if m == 0:
        return _zero()
    diff = sub(first, second)
    return total(diff * diff) * (schedule.weight / m)


@dataclass(frozen=True)
class CentroidState:
    """Moving per-class centroids for each domain.

    Between steps the centroids are plain constants; within a step,
    :func:`update_centroids` returns centroids that still depend on the
    batch features, so the alignment loss carries gradients.
    """

    num_classes: int
    dim: int
    momentum: float = 0.7
    source: dict[int, Tensor] = field(default_factory=dict)
    target: dict[int, Tensor] = field(default_factory=dict)
    source_counts: dict[int, int] = field(default_factory=dict)
    target_counts: dict[int, int] = field(default_factory=dict)

    def centroids(self, domain: str) -> dict[int, Tensor]:
        if domain not in (SOURCE, TARGET):
            raise ContractError(f"unknown domain {domain!r}")
        return self.source if domain == SOURCE else self.target

    def counts(self, domain: str) -> dict[int, int]:
        return self.source_counts if domain == SOURCE else self.target_counts

    def detached(self) -> CentroidState:
        return replace(
            self,
            source={k: detach(c) for k, c in self.source.items()},
            target={k: detach(c) for k, c in self.target.items()},
        )

    def common_classes(self) -> list[int]:
        return sorted(set(self.source) & set(self.target))


def update_centroids(
    state: CentroidState, features: Tensor, labels: np.ndarray, domain: str
) -> CentroidState:
    """EMA update: C <- theta * C_prev + (1 - theta) * batch mean, per class present."""
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] != labels.size:
        raise DimensionError(f"{features.shape[0]} feature rows but {labels.size} labels")
    if features.shape[1] != state.dim:
        raise DimensionError(f"centroid dimension {state.dim} vs features {features.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= state.num_classes):
        raise ContractError(f"labels must lie in [0, {state.num_classes})")

    centroids = dict(state.centroids(domain))
    counts = dict(state.counts(domain))
    theta = state.momentum
    for k in np.unique(labels):
        k = int(k)
        batch_mean = masked_row_mean(features, (labels == k).astype(np.float64))
        if k in centroids:
            centroids[k] = centroids[k] * theta + batch_mean * (1.0 - theta)
        else:
            centroids[k] = batch_mean
        counts[k] = counts.get(k, 0) + int((labels == k).sum())

    if domain == SOURCE:
        return replace(state, source=centroids, source_counts=counts)
    return replace(state, target=centroids, target_counts=counts)


def centroid_alignment(state: CentroidState, *, normalize: bool = False) -> Tensor:
    """Sum over classes seen in both domains of the squared centroid distance.

    With ``normalize`` the sum is divided by the centroid dimension times the
    number of common classes, giving the mean squared per-coordinate gap.
    """
    common = state.common_classes()
    if not common:
        logger.warning("centroid alignment has no class initialized in both domains")
        return _zero()
    loss = _zero()
    for k in common:
        diff = sub(state.source[k], state.target[k])
        loss = loss + total(diff * diff)
    if normalize:
        loss = loss * (1.0 / (state.dim * len(common)))
    return loss
