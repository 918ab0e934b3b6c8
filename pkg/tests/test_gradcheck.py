from __future__ import annotations

import numpy as np

from aglp._gradcheck import (
    analytic_gradient,
    gradient_error,
    numerical_gradient,
    numerical_parameter_gradient,
)
from aglp._tensor import parameter, total


def test_numerical_gradient_of_square(rng):
    values = rng.normal(size=(2, 3))
    (numeric,) = numerical_gradient(lambda t: total(t[0] * t[0]), [values])
    np.testing.assert_allclose(numeric, 2 * values, atol=1e-8)


def test_analytic_and_numerical_agree(rng):
    values = [rng.normal(size=(3, 3))]
    fn = lambda t: total(t[0] * t[0] * t[0])
    (analytic,) = analytic_gradient(fn, values)
    (numeric,) = numerical_gradient(fn, values)
    assert gradient_error(analytic, numeric) < 1e-6


def test_gradient_error_is_relative():
    assert gradient_error(np.array([[100.0]]), np.array([[101.0]])) == 1.0 / 101.0


def test_gradient_error_floor_for_tiny_gradients():
    assert gradient_error(np.array([[0.0]]), np.array([[1e-6]])) == 1e-6 / 1e-3


def test_parameter_perturbation_restores_values(rng):
    weight = parameter(rng.normal(size=(2, 2)))
    before = weight.numpy()
    grads = numerical_parameter_gradient(
        lambda: float((weight.values**2).sum()), {"w": weight}
    )
    np.testing.assert_array_equal(weight.values, before)
    np.testing.assert_allclose(grads["w"], 2 * before, atol=1e-8)
