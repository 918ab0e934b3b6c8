"""Central finite-difference oracles for the tape gradients."""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from aglp._tensor import Tape, Tensor, backward

ScalarFn = Callable[[list[Tensor]], Tensor]

FD_STEP = 1e-5
ERROR_FLOOR = 1e-3


def analytic_gradient(fn: ScalarFn, values: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(value, requires_grad=True) for value in values]
    with Tape():
        loss = fn(leaves)
    grads = backward(loss)
    return [grads[leaf] for leaf in leaves]


def numerical_gradient(
    fn: ScalarFn, values: Sequence[np.ndarray], eps: float = FD_STEP
) -> list[np.ndarray]:
    base = [np.array(value, dtype=np.float64, ndmin=2) for value in values]
    grads = []
    for index, array in enumerate(base):
        grad = np.zeros_like(array)
        for position in np.ndindex(array.shape):
            original = array[position]
            array[position] = original + eps
            plus = fn([Tensor(value) for value in base]).item()
            array[position] = original - eps
            minus = fn([Tensor(value) for value in base]).item()
            array[position] = original
            grad[position] = (plus - minus) / (2.0 * eps)
        grads.append(grad)
    return grads


def numerical_parameter_gradient(
    loss_fn: Callable[[], float], parameters: Mapping[str, Tensor], eps: float = FD_STEP
) -> dict[str, np.ndarray]:
    """Finite differences of ``loss_fn`` w.r.t. parameters, perturbed in place."""
    grads = {}
    for name, tensor in parameters.items():
        grad = np.zeros_like(tensor.values)
        for position in np.ndindex(tensor.shape):
            original = tensor.values[position]
            tensor.values[position] = original + eps
            plus = loss_fn()
            tensor.values[position] = original - eps
            minus = loss_fn()
            tensor.values[position] = original
            grad[position] = (plus - minus) / (2.0 * eps)
        grads[name] = grad
    return grads


def gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute disagreement relative to the largest gradient magnitude."""
    magnitude = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max(initial=0.0) / max(magnitude, ERROR_FLOOR))


def check_gradients(fn: ScalarFn, values: Sequence[np.ndarray], eps: float = FD_STEP) -> float:
    analytic = analytic_gradient(fn, values)
    numeric = numerical_gradient(fn, values, eps)
    return max(gradient_error(a, n) for a, n in zip(analytic, numeric))
