"""The training loop: one fused forward pass per step, every loss term, SGD, evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from aglp._config import ModelConfig, TrainerConfig, check_topk
from aglp._data import Batch, SsdaDataset, sample_batch
from aglp._errors import ConfigurationError, ContractError, TrainingAborted
from aglp._losses import (
    SOURCE,
    TARGET,
    CentroidState,
    RampSchedule,
    aac_loss,
    centroid_alignment,
    consistency_loss,
    cross_entropy,
    pairwise_pseudo_labels,
    pl_loss,
    update_centroids,
)
from aglp._model import AglpModel
from aglp._prototypes import (
    PrototypeSet,
    adapt_source_labels,
    adapted_source_loss,
    compute_prototypes,
    protonet_predict,
    pseudo_label,
)
from aglp._tensor import Gradients, Tape, Tensor, backward, rows

logger = logging.getLogger(__name__)

TERMS = ("source", "labeled", "aac", "pl", "consistency", "centroid")


@dataclass(frozen=True)
class LossReport:
    step: int
    source: float
    labeled: float
    aac: float
    pl: float
    consistency: float
    centroid: float
    beta: float
    total: float
    learning_rate: float

    HEADER = (
        "step",
        "source",
        "labeled",
        "aac",
        "pl",
        "consistency",
        "unlabeled",
        "centroid",
        "total",
        "learning_rate",
    )

    @property
    def unlabeled(self) -> float:
        return self.aac + self.pl + self.consistency

    def as_row(self) -> list:
        return [
            self.step,
            self.source,
            self.labeled,
            self.aac,
            self.pl,
            self.consistency,
            self.unlabeled,
            self.centroid,
            self.total,
            self.learning_rate,
        ]


def weighted_total(terms: dict[str, float], beta: float) -> float:
    return (
        terms["source"]
        + terms["labeled"]
        + terms["aac"]
        + terms["pl"]
        + terms["consistency"]
        + beta * terms["centroid"]
    )


class Sgd:
    """SGD with momentum and L2 weight decay; velocities keyed by parameter name."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4) -> None:
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, parameters: dict[str, Tensor], grads: Gradients, learning_rate: float) -> None:
        for name, tensor in parameters.items():
            grad = grads[tensor] + self.weight_decay * tensor.values
            velocity = self.velocity.get(name)
            velocity = grad if velocity is None else self.momentum * velocity + grad
            self.velocity[name] = velocity
            tensor.values -= learning_rate * velocity


def learning_rate(config: TrainerConfig, steps_since_restart: int) -> float:
    """Inverse decay lr * (1 + gamma * t)^(-power)."""
    return config.learning_rate * (1.0 + config.lr_gamma * steps_since_restart) ** (
        -config.lr_power
    )


@dataclass
class TrainerState:
    config: TrainerConfig
    model: AglpModel
    optimizer: Sgd
    centroids: CentroidState
    batch_rng: np.random.Generator
    dropout_rng: np.random.Generator
    step: int = 0
    schedule_origin: int = 0
    pseudo_centers: PrototypeSet | None = None

    @property
    def adapting(self) -> bool:
        """Source label adaptation replaces plain source cross-entropy."""
        return (
            self.config.use_sla
            and self.step >= self.config.warmup
            and self.pseudo_centers is not None
        )


def init_state(
    config: TrainerConfig, model_config: ModelConfig, dataset: SsdaDataset
) -> TrainerState:
    init_seed, batch_seed, dropout_seed = np.random.SeedSequence(config.seed).spawn(3)
    model = AglpModel(
        model_config,
        dataset.dim,
        dataset.num_classes,
        np.random.default_rng(init_seed),
        use_saa=config.use_saa,
    )
    return TrainerState(
        config=config,
        model=model,
        optimizer=Sgd(config.momentum, config.weight_decay),
        centroids=CentroidState(
            dataset.num_classes, model.fused_dim, momentum=config.centroid_momentum
        ),
        batch_rng=np.random.default_rng(batch_seed),
        dropout_rng=np.random.default_rng(dropout_seed),
    )


def objective(
    state: TrainerState, batch: Batch
) -> tuple[Tensor, dict[str, Tensor], CentroidState]:
    """Every loss term for one batch, from a single forward pass over all of its rows.

    Row order: source, labeled target, unlabeled raw, view a, view b. The
    returned centroid state still depends on this batch's features.
    """
    config = state.config
    model = state.model
    ns, nl, m = batch.num_source, batch.num_labeled, batch.num_unlabeled
    bounds = [int(b) for b in np.cumsum([0, ns, nl, m, m, m])]
    result = model.forward(batch.stacked(), rng=state.dropout_rng)
    blocks = [rows(result.probabilities, a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    p_source, p_labeled, p_raw, p_view_a, p_view_b = blocks
    fused_source = rows(result.fused, 0, ns)

    terms: dict[str, Tensor] = {}
    if state.adapting:
        protonet = protonet_predict(state.pseudo_centers, fused_source.numpy())
        adapted = adapt_source_labels(batch.source_y, protonet.numpy(), config.alpha)
        terms["source"] = adapted_source_loss(p_source, adapted)
    else:
        terms["source"] = cross_entropy(p_source, batch.source_y)
    terms["labeled"] = cross_entropy(p_labeled, batch.labeled_y)

    if config.use_cdac and m > 0:
        raw_features = rows(result.features, bounds[2], bounds[3]).numpy()
        similar = pairwise_pseudo_labels(raw_features, config.topk)
        ramp = RampSchedule(config.nu, config.ramp_steps, state.step)
        terms["aac"] = aac_loss(p_raw, p_view_a, similar)
        terms["pl"] = pl_loss(p_raw, p_view_b, config.tau)
        terms["consistency"] = consistency_loss(p_view_a, p_view_b, ramp)
    else:
        terms["aac"] = terms["pl"] = terms["consistency"] = Tensor(0.0)

    centroids = state.centroids
    if config.use_ca:
        centroids = update_centroids(centroids, fused_source, batch.source_labels, SOURCE)
        # labeled targets keep their true labels, unlabeled ones take the classifier's
        target_labels = batch.labeled_labels
        if m > 0:
            target_labels = np.concatenate([target_labels, pseudo_label(p_raw)])
        target_features = rows(result.fused, ns, ns + nl + m)
        centroids = update_centroids(centroids, target_features, target_labels, TARGET)
        terms["centroid"] = centroid_alignment(
            centroids, normalize=config.centroid_normalize
        )
    else:
        terms["centroid"] = Tensor(0.0)

    total = (
        terms["source"]
        + terms["labeled"]
        + terms["aac"]
        + terms["pl"]
        + terms["consistency"]
        + terms["centroid"] * config.beta
    )
    return total, terms, centroids


def train_step(state: TrainerState, batch: Batch) -> tuple[TrainerState, LossReport]:
    config = state.config
    rate = learning_rate(config, state.step - state.schedule_origin)
    with Tape():
        total, terms, centroids = objective(state, batch)

    values = {name: terms[name].item() for name in TERMS}
    for name, value in values.items():
        if not math.isfinite(value):
            raise TrainingAborted(state.step, name, value)

    if total.requires_grad:
        state.optimizer.step(state.model.trainable_parameters(), backward(total), rate)
    state.centroids = centroids.detached()

    report = LossReport(
        step=state.step,
        **values,
        beta=config.beta,
        total=weighted_total(values, config.beta),
        learning_rate=rate,
    )
    state.step += 1
    return state, report


def refresh_pseudo_centers(state: TrainerState, dataset: SsdaDataset) -> PrototypeSet:
    """Centers from labeled target rows pooled with pseudo-labeled unlabeled rows."""
    config = state.config
    model = state.model
    features, _ = model.embed(dataset.labeled_x, config.eval_batch_size)
    labels = dataset.labeled_y
    if config.center_source == "pseudo" and len(dataset.unlabeled_x):
        unlabeled, probabilities = model.embed(dataset.unlabeled_x, config.eval_batch_size)
        features = np.vstack([features, unlabeled])
        labels = np.concatenate([labels, pseudo_label(probabilities)])
    state.pseudo_centers = compute_prototypes(
        features,
        labels,
        dataset.num_classes,
        temperature=config.proto_temperature,
        mode=config.temperature_mode,
        previous=state.pseudo_centers,
    )
    return state.pseudo_centers


def prepare_step(state: TrainerState, dataset: SsdaDataset) -> None:
    """Warmup boundary: restart the schedule; afterwards refresh centers on the interval."""
    config = state.config
    if not config.use_sla or state.step < config.warmup:
        return
    if state.step == config.warmup:
        state.schedule_origin = config.warmup
        logger.debug("warmup over at step %d, schedule restarted", state.step)
    if (state.step - config.warmup) % config.update_interval == 0:
        refresh_pseudo_centers(state, dataset)


@dataclass(frozen=True)
class EvaluationReport:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray

    @property
    def count(self) -> int:
        return int(self.confusion.sum())


def report_from_predictions(
    predictions: np.ndarray, labels: np.ndarray, num_classes: int
) -> EvaluationReport:
    """Confusion rows are true classes, columns predicted. Absent classes score NaN."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.size == 0:
        raise ContractError("cannot evaluate an empty set")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(confusion) / support, np.nan)
    accuracy = float(np.trace(confusion) / labels.size)
    return EvaluationReport(accuracy=accuracy, per_class=per_class, confusion=confusion)


def evaluate(
    model: AglpModel, x: np.ndarray, labels: np.ndarray, batch_size: int = 256
) -> EvaluationReport:
    """Dropout-free evaluation; each chunk of ``batch_size`` rows forms its own graph."""
    if len(x) == 0:
        raise ContractError("cannot evaluate an empty set")
    return report_from_predictions(model.predict(x, batch_size), labels, model.num_classes)


@dataclass(frozen=True)
class EvaluationRecord:
    step: int
    target_accuracy: float
    source_accuracy: float

    HEADER = ("step", "target_accuracy", "source_accuracy")

    def as_row(self) -> list:
        return [self.step, self.target_accuracy, self.source_accuracy]


def target_split(dataset: SsdaDataset) -> tuple[np.ndarray, np.ndarray]:
    """The held-out target test split, or the unlabeled pool's truth when there is none."""
    x, labels = dataset.split("test")
    if len(x) == 0:
        return dataset.unlabeled_x, dataset.unlabeled_y
    return x, labels


def evaluation_record(state: TrainerState, dataset: SsdaDataset) -> EvaluationRecord:
    size = state.config.eval_batch_size
    target_x, target_y = target_split(dataset)
    target = evaluate(state.model, target_x, target_y, size)
    source = evaluate(state.model, dataset.source_x, dataset.source_y, size)
    return EvaluationRecord(state.step, target.accuracy, source.accuracy)


@dataclass
class TrainingResult:
    reports: list[LossReport] = field(default_factory=list)
    evaluations: list[EvaluationRecord] = field(default_factory=list)
    state: TrainerState | None = None

    @property
    def final(self) -> EvaluationRecord | None:
        return self.evaluations[-1] if self.evaluations else None


StepCallback = Callable[[TrainerState, LossReport, "EvaluationRecord | None"], None]


def check_pools(config: TrainerConfig, dataset: SsdaDataset) -> None:
    requested = {
        "source": (config.batch_source, len(dataset.source_y)),
        "labeled": (config.batch_labeled, len(dataset.labeled_y)),
        "unlabeled": (config.batch_unlabeled, len(dataset.unlabeled_x)),
    }
    for name, (count, pool) in requested.items():
        if count > pool:
            raise ConfigurationError(f"batch_{name}={count} exceeds the {name} pool of {pool}")


def run(
    config: TrainerConfig,
    dataset: SsdaDataset,
    model_config: ModelConfig | None = None,
    *,
    state: TrainerState | None = None,
    callback: StepCallback | None = None,
) -> TrainingResult:
    """Train until ``config.steps``, starting fresh or from a restored ``state``."""
    config.validate()
    check_pools(config, dataset)
    if state is None:
        (model_config or ModelConfig()).validate()
        state = init_state(config, model_config or ModelConfig(), dataset)
    check_topk(config, state.model.config.feature_dim)

    result = TrainingResult(state=state)
    while state.step < config.steps:
        prepare_step(state, dataset)
        batch = sample_batch(
            dataset,
            config.batch_source,
            config.batch_labeled,
            config.batch_unlabeled,
            state.batch_rng,
            strength=config.augment_strength,
        )
        state, report = train_step(state, batch)
        result.reports.append(report)

        record = None
        if state.step % config.eval_every == 0 or state.step == config.steps:
            record = evaluation_record(state, dataset)
            result.evaluations.append(record)
            logger.info(
                "step %d: target acc %.4f, source acc %.4f, loss %.4f",
                record.step,
                record.target_accuracy,
                record.source_accuracy,
                report.total,
            )
        if callback is not None:
            callback(state, report, record)
    return result
