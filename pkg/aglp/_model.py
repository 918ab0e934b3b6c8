"""Feature extractor, Data Structure Analyzer, instance graph, GCN stack and classifier."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from aglp._config import ModelConfig, from_dict, to_dict
from aglp._errors import ConfigurationError, ContractError, DimensionError
from aglp._files import read_arrays, write_arrays
from aglp._tensor import (
    Tensor,
    concat,
    dropout,
    parameter,
    power,
    relu,
    row_sum,
    sigmoid,
    softmax_rows,
    transpose,
)

WEIGHTS_FILE = "weights.csv"
MODEL_FILE = "model.yaml"


class Dense:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, gain: float = 2.0):
        self.weight = parameter(rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out)))
        self.bias = parameter(np.zeros((1, fan_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class Extractor:
    """Multilayer perceptron standing in for the convolutional backbone."""

    def __init__(self, sizes: list[int], rng: np.random.Generator) -> None:
        self.sizes = sizes
        self.layers = [Dense(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.input_dim:
            raise ContractError(
                f"extractor expects {self.input_dim} input columns, got shape {x.shape}"
            )
        for layer in self.layers:
            x = relu(layer(x))
        return x

    def parameters(self) -> dict[str, Tensor]:
        named = {}
        for index, layer in enumerate(self.layers):
            named.update(layer.parameters(f"extractor.{index}"))
        return named


class DsaNetwork:
    """Data Structure Analyzer: one hidden layer of width h, logistic output of width h."""

    def __init__(self, feature_dim: int, score_dim: int, rng: np.random.Generator) -> None:
        self.hidden = Dense(feature_dim, score_dim, rng)
        self.out = Dense(score_dim, score_dim, rng, gain=1.0)

    def __call__(self, features: Tensor) -> Tensor:
        return sigmoid(self.out(relu(self.hidden(features))))

    def parameters(self) -> dict[str, Tensor]:
        return {**self.hidden.parameters("dsa.hidden"), **self.out.parameters("dsa.out")}


@dataclass(frozen=True)
class InstanceGraph:
    adjacency: Tensor
    degree: Tensor
    propagation: Tensor
    scores: Tensor | None = None

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_adjacency(cls, adjacency: Tensor, scores: Tensor | None = None) -> InstanceGraph:
        """Symmetric normalization D^-1/2 A D^-1/2 with D_ii = sum_j A_ij."""
        rows, cols = adjacency.shape
        if rows != cols or rows == 0:
            raise DimensionError(f"adjacency must be square and non-empty, got {adjacency.shape}")
        degree = row_sum(adjacency)
        if np.any(degree.values <= 0):
            raise ContractError("adjacency has a node with non-positive degree")
        inv_sqrt = power(degree, -0.5)
        propagation = adjacency * inv_sqrt * transpose(inv_sqrt)
        return cls(adjacency=adjacency, degree=degree, propagation=propagation, scores=scores)


class GcnStack:
    def __init__(self, dims: list[int], dropout_rate: float, rng: np.random.Generator) -> None:
        self.dims = dims
        self.dropout = dropout_rate
        self.weights = [
            parameter(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)))
            for a, b in zip(dims[:-1], dims[1:])
        ]

    @classmethod
    def from_weights(cls, weights: list[np.ndarray], dropout_rate: float = 0.0) -> GcnStack:
        for before, after in zip(weights[:-1], weights[1:]):
            if before.shape[1] != after.shape[0]:
                raise ConfigurationError(
                    f"GCN layer chain breaks between {before.shape} and {after.shape}"
                )
        stack = cls.__new__(cls)
        stack.dims = [weights[0].shape[0]] + [w.shape[1] for w in weights]
        stack.dropout = dropout_rate
        stack.weights = [parameter(w) for w in weights]
        return stack

    def __call__(
        self, graph: InstanceGraph, signal: Tensor, rng: np.random.Generator | None = None
    ) -> Tensor:
        if graph.num_nodes != signal.shape[0]:
            raise ContractError(
                f"graph has {graph.num_nodes} nodes but the signal has {signal.shape[0]} rows"
            )
        if signal.shape[1] != self.dims[0]:
            raise ConfigurationError(
                f"GCN expects {self.dims[0]} input channels, got {signal.shape[1]}"
            )
        h = signal
        last = len(self.weights) - 1
        for index, weight in enumerate(self.weights):
            h = graph.propagation @ h @ weight
            if index != last:
                h = relu(h)
            if rng is not None:
                h = dropout(h, self.dropout, rng)
        return h

    def parameters(self) -> dict[str, Tensor]:
        return {f"gcn.{index}.weight": weight for index, weight in enumerate(self.weights)}


class Classifier:
    def __init__(self, fused_dim: int, num_classes: int, rng: np.random.Generator) -> None:
        self.dense = Dense(fused_dim, num_classes, rng, gain=1.0)

    def logits(self, features: Tensor, structure: Tensor | None = None) -> Tensor:
        if structure is not None:
            if structure.shape[0] != features.shape[0]:
                raise ContractError(
                    f"{features.shape[0]} feature rows but {structure.shape[0]} structure rows"
                )
            features = concat([features, structure])
        if features.shape[1] != self.dense.weight.shape[0]:
            raise ContractError(
                f"classifier expects {self.dense.weight.shape[0]} fused columns, "
                f"got {features.shape[1]}"
            )
        return self.dense(features)

    def __call__(self, features: Tensor, structure: Tensor | None = None) -> Tensor:
        return softmax_rows(self.logits(features, structure))

    def parameters(self) -> dict[str, Tensor]:
        return self.dense.parameters("classifier")


@dataclass(frozen=True)
class ForwardPass:
    features: Tensor
    graph: InstanceGraph | None
    structure: Tensor | None
    fused: Tensor
    logits: Tensor
    probabilities: Tensor


class AglpModel:
    """The full network: G = F(x), graph from DSA scores, Z = GCN(graph, G), P = C(G ++ Z).

    With ``use_saa`` off, the DSA and GCN still exist (so checkpoints keep one
    layout) but the forward pass and the trainable set skip them.
    """

    def __init__(
        self,
        config: ModelConfig,
        input_dim: int,
        num_classes: int,
        rng: np.random.Generator,
        *,
        use_saa: bool = True,
    ) -> None:
        config.validate()
        self.config = config
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.use_saa = use_saa
        self.extractor = Extractor([input_dim, *config.extractor_hidden, config.feature_dim], rng)
        self.dsa = DsaNetwork(config.feature_dim, config.score_dim, rng)
        self.gcn = GcnStack(config.gcn_dims(), config.dropout, rng)
        self.classifier = Classifier(self.fused_dim, num_classes, rng)

    @property
    def fused_dim(self) -> int:
        if self.use_saa:
            return self.config.feature_dim + self.config.gcn_out
        return self.config.feature_dim

    def parameters(self) -> dict[str, Tensor]:
        return {
            **self.extractor.parameters(),
            **self.dsa.parameters(),
            **self.gcn.parameters(),
            **self.classifier.parameters(),
        }

    def trainable_parameters(self) -> dict[str, Tensor]:
        named = self.parameters()
        if self.use_saa:
            return named
        return {
            name: tensor
            for name, tensor in named.items()
            if not name.startswith(("dsa.", "gcn."))
        }

    def extract(self, x: Tensor | np.ndarray) -> Tensor:
        return self.extractor(x if isinstance(x, Tensor) else Tensor(x))

    def build_graph(self, features: Tensor) -> InstanceGraph:
        """A = S S^T + I over structure scores S = DSA(G), then symmetric normalization."""
        if features.shape[0] < 1:
            raise ContractError("cannot build a graph over zero rows")
        scores = self.dsa(features)
        adjacency = scores @ transpose(scores) + Tensor(np.eye(features.shape[0]))
        return InstanceGraph.from_adjacency(adjacency, scores)

    def gcn_forward(
        self, graph: InstanceGraph, features: Tensor, rng: np.random.Generator | None = None
    ) -> Tensor:
        return self.gcn(graph, features, rng)

    def classify(self, features: Tensor, structure: Tensor | None = None) -> Tensor:
        return self.classifier(features, structure)

    def forward(
        self, x: Tensor | np.ndarray, rng: np.random.Generator | None = None
    ) -> ForwardPass:
        """``rng`` enables dropout; pass ``None`` for deterministic evaluation."""
        features = self.extract(x)
        graph = structure = None
        fused = features
        if self.use_saa:
            graph = self.build_graph(features)
            structure = self.gcn_forward(graph, features, rng)
            fused = concat([features, structure])
        logits = self.classifier.logits(fused)
        return ForwardPass(
            features=features,
            graph=graph,
            structure=structure,
            fused=fused,
            logits=logits,
            probabilities=softmax_rows(logits),
        )

    def embed(self, x: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Fused features and probabilities, chunk by chunk, each chunk its own graph."""
        if len(x) == 0:
            empty = np.zeros((0, self.fused_dim)), np.zeros((0, self.num_classes))
            return empty
        fused, probabilities = [], []
        for start in range(0, len(x), batch_size):
            result = self.forward(x[start : start + batch_size])
            fused.append(result.fused.numpy())
            probabilities.append(result.probabilities.numpy())
        return np.vstack(fused), np.vstack(probabilities)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        _, probabilities = self.embed(x, batch_size)
        return np.argmax(probabilities, axis=1)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: tensor.numpy() for name, tensor in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.parameters()
        missing = sorted(set(named) - set(arrays))
        if missing:
            raise DimensionError(f"checkpoint lacks parameters {missing}")
        for name, tensor in named.items():
            if arrays[name].shape != tensor.shape:
                raise DimensionError(
                    f"{name}: checkpoint shape {arrays[name].shape} vs model shape {tensor.shape}"
                )
            tensor.values[...] = arrays[name]


def save_checkpoint(model: AglpModel, directory: Path) -> None:
    """``model.yaml`` (sizes and switches) plus ``weights.csv`` (name, rows, cols, values)."""
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "model": to_dict(model.config),
        "input_dim": model.input_dim,
        "num_classes": model.num_classes,
        "use_saa": model.use_saa,
    }
    with open(directory / MODEL_FILE, "w", encoding="utf-8") as f:
        yaml.safe_dump(header, f, sort_keys=False)
    write_arrays(directory / WEIGHTS_FILE, model.snapshot())


def load_checkpoint(directory: Path) -> AglpModel:
    path = directory / MODEL_FILE
    if not path.is_file():
        raise ConfigurationError(f"no model checkpoint at {directory}")
    with open(path, encoding="utf-8") as f:
        header = yaml.safe_load(f)
    model = AglpModel(
        from_dict(ModelConfig, header["model"]),
        header["input_dim"],
        header["num_classes"],
        np.random.default_rng(0),
        use_saa=header["use_saa"],
    )
    model.load_arrays(read_arrays(directory / WEIGHTS_FILE))
    return model
