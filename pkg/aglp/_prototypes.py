"""Class prototypes, the prototypical classifier, and source label adaptation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from aglp._errors import ContractError, DimensionError, PrototypeUndefinedError
from aglp._losses import cross_entropy
from aglp._tensor import Tensor, as_tensor, scale, softmax_rows, sq_distances


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """Per-class centers with a temperature.

    ``mode="multiply"`` scores classes by exp(-d * T); ``"divide"`` by exp(-d / T).
    """

    centers: np.ndarray
    temperature: float = 0.6
    mode: str = "multiply"

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ContractError(f"prototype temperature must be positive, got {self.temperature}")
        if self.mode not in ("multiply", "divide"):
            raise ContractError(f"unknown temperature mode {self.mode!r}")
        centers = np.array(self.centers, dtype=np.float64, ndmin=2)
        if not np.all(np.isfinite(centers)):
            raise ContractError("every class needs a finite center")
        centers.flags.writeable = False
        object.__setattr__(self, "centers", centers)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def scale(self) -> float:
        return self.temperature if self.mode == "multiply" else 1.0 / self.temperature


def compute_prototypes(
    features: Tensor | np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    *,
    temperature: float = 0.6,
    mode: str = "multiply",
    previous: PrototypeSet | None = None,
) -> PrototypeSet:
    """c_k = mean of the class-k rows.

    Classes with no rows reuse ``previous`` when given; otherwise
    :class:`PrototypeUndefinedError` lists them.
    """
    values = features.values if isinstance(features, Tensor) else np.asarray(features, float)
    labels = np.asarray(labels, dtype=np.int64)
    if values.shape[0] != labels.size:
        raise DimensionError(f"{values.shape[0]} feature rows but {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")

    counts = np.bincount(labels, minlength=num_classes)[:num_classes]
    missing = [k for k in range(num_classes) if counts[k] == 0]
    if missing and previous is None:
        raise PrototypeUndefinedError(missing)

    centers = np.zeros((num_classes, values.shape[1]))
    np.add.at(centers, labels, values)
    present = counts > 0
    centers[present] /= counts[present, None]
    for k in missing:
        centers[k] = previous.centers[k]
    return PrototypeSet(centers, temperature, mode)


def protonet_predict(prototypes: PrototypeSet, features: Tensor | np.ndarray) -> Tensor:
    features = as_tensor(features)
    if features.shape[1] != prototypes.dim:
        raise DimensionError(
            f"features have {features.shape[1]} columns, prototypes {prototypes.dim}"
        )
    distances = sq_distances(features, Tensor(prototypes.centers))
    return softmax_rows(scale(distances, -prototypes.scale))


def pseudo_label(probabilities: Tensor | np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    values = probabilities.values if isinstance(probabilities, Tensor) else probabilities
    if len(values) == 0:
        raise ContractError("pseudo_label needs at least one row")
    return np.argmax(values, axis=1)


def adapt_source_labels(labels: np.ndarray, protonet: np.ndarray, alpha: float) -> np.ndarray:
    """(1 - alpha) * y + alpha * P_ppc(x), row by row."""
    if labels.shape != protonet.shape:
        raise DimensionError(f"labels {labels.shape} vs prototype predictions {protonet.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * labels + alpha * protonet


def adapted_source_loss(probabilities: Tensor, adapted: np.ndarray) -> Tensor:
    """Cross-entropy against the softened source labels."""
    return cross_entropy(probabilities, adapted)
