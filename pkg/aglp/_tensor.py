"""A small reverse-mode differentiation engine over dense float64 matrices.

Every value is a rank-2 array (row vectors are ``1 x n``, scalars ``1 x 1``).
Operations executed while a :class:`Tape` is active and involving at least one
tensor that requires a gradient are recorded on that tape, in execution order.
:func:`backward` walks the tape in reverse and returns a :class:`Gradients`
map for every leaf that requires a gradient.
"""
from __future__ import annotations

from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from aglp._errors import ContractError, DimensionError

LOG_EPS = 1e-12

GradientRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_active_tape: ContextVar["Tape | None"] = ContextVar("active_tape", default=None)


class Tensor:
    __slots__ = ("values", "requires_grad", "node_id", "_tape")

    def __init__(self, values, requires_grad: bool = False) -> None:
        array = np.array(values, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim > 2:
            raise DimensionError(f"tensors are rank 1 or 2, got shape {array.shape}")
        self.values = array
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, values: np.ndarray) -> Tensor:
        tensor = cls.__new__(cls)
        tensor.values = values
        tensor.requires_grad = False
        tensor.node_id = None
        tensor._tape = None
        return tensor

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def __add__(self, other) -> Tensor:
        return add(self, as_tensor(other))

    def __radd__(self, other) -> Tensor:
        return add(as_tensor(other), self)

    def __sub__(self, other) -> Tensor:
        return sub(self, as_tensor(other))

    def __rsub__(self, other) -> Tensor:
        return sub(as_tensor(other), self)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, as_tensor(other))

    def __rmul__(self, other) -> Tensor:
        return self.__mul__(other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, as_tensor(other))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


@dataclass(frozen=True)
class TapeEntry:
    output: int
    inputs: tuple[int, ...]
    rule: GradientRule


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations run inside the ``with`` block are
    recorded. A tape belongs to a single training step and a single thread.
    """

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self.nodes: list[Tensor] = []
        self._tokens = []

    def __enter__(self) -> Tape:
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc_info) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.entries)

    def register(self, tensor: Tensor) -> int:
        if tensor._tape is not self:
            tensor._tape = self
            tensor.node_id = len(self.nodes)
            self.nodes.append(tensor)
        return tensor.node_id

    def record(self, output: Tensor, inputs: Sequence[Tensor], rule: GradientRule) -> None:
        input_ids = tuple(self.register(tensor) for tensor in inputs)
        output_id = self.register(output)
        self.entries.append(TapeEntry(output_id, input_ids, rule))


class Gradients:
    """Gradient map returned by :func:`backward`.

    Looking up a tensor the loss does not depend on returns zeros.
    """

    def __init__(self, grads: dict[int, tuple[Tensor, np.ndarray]]) -> None:
        self._grads = grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        entry = self._grads.get(id(tensor))
        if entry is None:
            return np.zeros_like(tensor.values)
        return entry[1]

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def __iter__(self) -> Iterator[Tensor]:
        return (tensor for tensor, _ in self._grads.values())


def backward(loss: Tensor) -> Gradients:
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not loss.requires_grad:
        raise ContractError("loss was not recorded on a tape")

    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
    for entry in reversed(tape.entries):
        grad = pending.pop(entry.output, None)
        if grad is None:
            continue
        for node_id, input_grad in zip(entry.inputs, entry.rule(grad)):
            if input_grad is None or not tape.nodes[node_id].requires_grad:
                continue
            if node_id in pending:
                pending[node_id] = pending[node_id] + input_grad
            else:
                pending[node_id] = input_grad

    return Gradients(
        {id(tape.nodes[node]): (tape.nodes[node], grad) for node, grad in pending.items()}
    )


def _result(values: np.ndarray, parents: tuple[Tensor, ...], rule: GradientRule) -> Tensor:
    out = Tensor._wrap(values)
    tape = _active_tape.get()
    if tape is not None and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        tape.record(out, parents, rule)
    return out


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    for dim_a, dim_b in zip(a.shape, b.shape):
        if dim_a != dim_b and dim_a != 1 and dim_b != 1:
            raise DimensionError(f"{name}: cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(
        axis for axis, (have, want) in enumerate(zip(grad.shape, shape)) if want == 1 and have != 1
    )
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _result(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _result(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _result(
        a.values * b.values,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        ),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(x.values * factor, (x,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} x {b.shape}")
    return _result(
        a.values @ b.values,
        (a, b),
        lambda g: (g @ b.values.T, a.values.T @ g),
    )


def transpose(x: Tensor) -> Tensor:
    return _result(x.values.T.copy(), (x,), lambda g: (g.T,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    """Natural log with the input clamped to ``[LOG_EPS, inf)``."""
    clamped = np.maximum(x.values, LOG_EPS)
    live = x.values >= LOG_EPS
    return _result(np.log(clamped), (x,), lambda g: (g * live / clamped,))


def relu(x: Tensor) -> Tensor:
    live = x.values > 0
    return _result(x.values * live, (x,), lambda g: (g * live,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.values))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.values**exponent
    return _result(
        out, (x,), lambda g: (g * exponent * x.values ** (exponent - 1.0),)
    )


def softmax_rows(x: Tensor) -> Tensor:
    if x.shape[1] < 1:
        raise DimensionError(f"softmax_rows needs at least one column, got shape {x.shape}")
    shifted = np.exp(x.values - x.values.max(axis=1, keepdims=True))
    out = shifted / shifted.sum(axis=1, keepdims=True)

    def rule(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result(out, (x,), rule)


def row_sum(x: Tensor) -> Tensor:
    return _result(
        x.values.sum(axis=1, keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g, x.shape).copy(),),
    )


def total(x: Tensor) -> Tensor:
    return _result(
        np.array([[x.values.sum()]]),
        (x,),
        lambda g: (np.full(x.shape, g[0, 0]),),
    )


def mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ContractError("mean of an empty tensor")
    count = x.size
    return _result(
        np.array([[x.values.mean()]]),
        (x,),
        lambda g: (np.full(x.shape, g[0, 0] / count),),
    )


def sq_distances(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance between every row of ``a`` and every row of ``b``."""
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"sq_distances: feature sizes differ for {a.shape} and {b.shape}")
    diff = a.values[:, None, :] - b.values[None, :, :]
    out = (diff**2).sum(axis=2)

    def rule(g: np.ndarray):
        grad_a = 2.0 * (g.sum(axis=1, keepdims=True) * a.values - g @ b.values)
        grad_b = 2.0 * (g.sum(axis=0)[:, None] * b.values - g.T @ a.values)
        return grad_a, grad_b

    return _result(out, (a, b), rule)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the feature axis."""
    rows = {tensor.shape[0] for tensor in tensors}
    if len(rows) != 1:
        shapes = [tensor.shape for tensor in tensors]
        raise DimensionError(f"concat: row counts differ across {shapes}")
    offsets = np.cumsum([0] + [tensor.shape[1] for tensor in tensors])

    def rule(g: np.ndarray):
        return tuple(g[:, start:stop] for start, stop in zip(offsets[:-1], offsets[1:]))

    return _result(
        np.concatenate([tensor.values for tensor in tensors], axis=1),
        tuple(tensors),
        rule,
    )


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    def rule(g: np.ndarray):
        grad = np.zeros_like(x.values)
        grad[start:stop] = g
        return (grad,)

    return _result(x.values[start:stop].copy(), (x,), rule)


def masked_row_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of the rows selected by a 0/1 vector, as a ``1 x d`` row."""
    weights = np.asarray(mask, dtype=np.float64).reshape(-1)
    if weights.size != x.shape[0]:
        raise DimensionError(f"masked_row_mean: {weights.size} weights for shape {x.shape}")
    count = weights.sum()
    if count <= 0:
        raise ContractError("masked_row_mean selects no rows")
    weights = weights / count
    return _result(
        weights[None, :] @ x.values,
        (x,),
        lambda g: (weights[:, None] * g,),
    )


def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    if mask.shape != x.shape:
        raise DimensionError(f"apply_mask: mask shape {mask.shape} differs from {x.shape}")
    return _result(x.values * mask, (x,), lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``."""
    if rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return apply_mask(x, mask)


def detach(x: Tensor) -> Tensor:
    return Tensor._wrap(x.values)


def topk_indices(x: Tensor | np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries of each row. Ties go to the lowest index.

    Not differentiable: the result is a plain integer array.
    """
    values = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if not 0 < k <= values.shape[1]:
        raise ContractError(f"top-k size {k} outside [1, {values.shape[1]}]")
    return np.argsort(-values, axis=1, kind="stable")[:, :k]
