"""Experiment configuration: dataclasses, validation and the YAML round trip."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from aglp._data import SsdaDataset, make_gaussian_shift
from aglp._errors import ConfigurationError

TEMPERATURE_MODES = ("multiply", "divide")
CENTER_SOURCES = ("pseudo", "labeled")


@dataclass(frozen=True)
class DatasetParams:
    num_classes: int = 4
    dim: int = 2
    n_source: int = 400
    n_target: int = 400
    n_test: int = 400
    shots: int = 3
    shift: float = 1.5
    rotation: float = 30.0
    radius: float = 2.0
    spread: float = 0.6
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2 or self.dim < 2:
            raise ConfigurationError("dataset needs num_classes >= 2 and dim >= 2")
        if self.shots < 1:
            raise ConfigurationError(f"dataset.shots must be positive, got {self.shots}")
        if self.n_target < self.shots * self.num_classes:
            raise ConfigurationError(
                f"dataset.n_target={self.n_target} cannot hold "
                f"{self.shots} shots x {self.num_classes} classes"
            )
        if self.n_source < 1 or self.n_test < 0 or self.spread <= 0 or self.radius <= 0:
            raise ConfigurationError("dataset sizes and spreads must be positive")

    def build(self) -> SsdaDataset:
        self.validate()
        return make_gaussian_shift(
            self.num_classes,
            self.dim,
            self.n_source,
            self.n_target,
            self.shots,
            self.shift,
            self.rotation,
            self.seed,
            n_test=self.n_test,
            radius=self.radius,
            spread=self.spread,
        )


@dataclass(frozen=True)
class ModelConfig:
    """Layer sizes.

    Image backbones would use feature_dim=1000, gcn_hidden=256, gcn_out=200 and gcn_layers=4.
    """

    extractor_hidden: tuple[int, ...] = (64,)
    feature_dim: int = 64
    score_dim: int = 16
    gcn_hidden: int = 32
    gcn_out: int = 16
    gcn_layers: int = 2
    dropout: float = 0.2

    def validate(self) -> None:
        sizes = (*self.extractor_hidden, self.feature_dim, self.score_dim, self.gcn_hidden)
        if min(sizes) < 1 or self.gcn_out < 1:
            raise ConfigurationError("model layer sizes must be positive")
        if self.gcn_layers < 1:
            raise ConfigurationError(f"model.gcn_layers must be >= 1, got {self.gcn_layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"model.dropout must lie in [0, 1), got {self.dropout}")

    def gcn_dims(self) -> list[int]:
        return [self.feature_dim] + [self.gcn_hidden] * (self.gcn_layers - 1) + [self.gcn_out]


@dataclass(frozen=True)
class TrainerConfig:
    steps: int = 3000
    warmup: int = 300
    learning_rate: float = 0.02
    lr_gamma: float = 0.001
    lr_power: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta: float = 1.0
    alpha: float = 0.3
    proto_temperature: float = 0.6
    temperature_mode: str = "multiply"
    center_source: str = "pseudo"
    update_interval: int = 100
    tau: float = 0.95
    nu: float = 1.0
    ramp_fraction: float = 0.2
    centroid_momentum: float = 0.7
    centroid_normalize: bool = True
    topk: int = 5
    batch_source: int = 12
    batch_labeled: int = 12
    batch_unlabeled: int = 12
    augment_strength: float = 0.1
    eval_every: int = 250
    eval_batch_size: int = 256
    checkpoint_every: int = 500
    use_cdac: bool = True
    use_sla: bool = True
    use_saa: bool = True
    use_ca: bool = True
    seed: int = 0

    @property
    def ramp_steps(self) -> int:
        return int(round(self.ramp_fraction * self.steps))

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigurationError(f"trainer.steps must be positive, got {self.steps}")
        if not 0 <= self.warmup < self.steps:
            raise ConfigurationError(
                f"trainer.warmup={self.warmup} must lie in [0, steps={self.steps})"
            )
        if self.beta < 0:
            raise ConfigurationError(f"trainer.beta must be >= 0, got {self.beta}")
        rates = {
            "learning_rate": self.learning_rate,
            "proto_temperature": self.proto_temperature,
            "update_interval": self.update_interval,
            "eval_every": self.eval_every,
            "eval_batch_size": self.eval_batch_size,
            "checkpoint_every": self.checkpoint_every,
            "topk": self.topk,
        }
        for name, value in rates.items():
            if value <= 0:
                raise ConfigurationError(f"trainer.{name} must be positive, got {value}")
        if min(self.lr_gamma, self.lr_power, self.weight_decay, self.nu) < 0:
            raise ConfigurationError("trainer schedule and weight-decay terms must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"trainer.momentum must lie in [0, 1), got {self.momentum}")
        for name in ("alpha", "centroid_momentum", "ramp_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"trainer.{name} must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError(f"trainer.tau must lie in (0, 1], got {self.tau}")
        if min(self.batch_source, self.batch_labeled, self.batch_unlabeled) < 0:
            raise ConfigurationError("trainer batch sizes must be >= 0")
        if self.batch_source + self.batch_labeled + self.batch_unlabeled < 1:
            raise ConfigurationError("trainer batches must hold at least one row per step")
        if self.augment_strength < 0:
            raise ConfigurationError("trainer.augment_strength must be >= 0")
        if self.temperature_mode not in TEMPERATURE_MODES:
            raise ConfigurationError(f"trainer.temperature_mode must be one of {TEMPERATURE_MODES}")
        if self.center_source not in CENTER_SOURCES:
            raise ConfigurationError(f"trainer.center_source must be one of {CENTER_SOURCES}")


def check_topk(config: TrainerConfig, feature_dim: int) -> None:
    """Pairwise labels compare top-k sets of extractor features, so k <= feature_dim."""
    if config.topk > feature_dim:
        raise ConfigurationError(
            f"trainer.topk={config.topk} exceeds model.feature_dim={feature_dim}"
        )

# Ablation presets. "baseline" is CDAC with source label adaptation.
PRESETS: dict[str, dict[str, bool]] = {
    "st": dict(use_cdac=False, use_sla=False, use_saa=False, use_ca=False),
    "baseline": dict(use_cdac=True, use_sla=True, use_saa=False, use_ca=False),
    "saa": dict(use_cdac=True, use_sla=True, use_saa=True, use_ca=False),
    "ca": dict(use_cdac=True, use_sla=True, use_saa=False, use_ca=True),
    "full": dict(use_cdac=True, use_sla=True, use_saa=True, use_ca=True),
}


def apply_preset(config: TrainerConfig, name: str) -> TrainerConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}, expected one of {list(PRESETS)}")
    return dataclasses.replace(config, **PRESETS[name])


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: DatasetParams = field(default_factory=DatasetParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    out_dir: str = "runs"
    repeat: int = 3
    presets: tuple[str, ...] = ("st", "saa", "ca", "full")

    def validate(self) -> None:
        self.dataset.validate()
        self.model.validate()
        self.trainer.validate()
        if self.repeat < 1:
            raise ConfigurationError(f"repeat must be positive, got {self.repeat}")
        for name in self.presets:
            if name not in PRESETS:
                raise ConfigurationError(f"unknown preset {name!r}")
        check_topk(self.trainer, self.model.feature_dim)


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        return _from_dict(hint, value, where)
    if origin is tuple:
        (item_hint, _) = typing.get_args(hint)
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where} must be a list, got {value!r}")
        return tuple(_coerce(item, item_hint, where) for item in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string, got {value!r}")
        return value
    raise ConfigurationError(f"{where}: unsupported field type {hint!r}")


def _from_dict(cls, data, where: str = "config"):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        dotted = ", ".join(f"{where}.{key}" for key in unknown)
        raise ConfigurationError(f"unknown config keys: {dotted}")
    values = {key: _coerce(value, hints[key], f"{where}.{key}") for key, value in data.items()}
    return cls(**values)


def _to_plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_to_plain(item) for item in value]
    return value


def to_dict(config) -> dict:
    return _to_plain(config)


def from_dict(cls, data: dict):
    return _from_dict(cls, data, cls.__name__)


def render_spec(spec: ExperimentSpec) -> str:
    return yaml.safe_dump(to_dict(spec), sort_keys=False)


def parse_spec(text: str) -> ExperimentSpec:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as error:
        raise ConfigurationError(f"config is not valid YAML: {error}") from error
    return _from_dict(ExperimentSpec, data, "config")


def load_spec(path: Path) -> ExperimentSpec:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as error:
        raise ConfigurationError(f"cannot read config {path}: {error}") from error
    return parse_spec(text)


def override(spec: ExperimentSpec, dotted_key: str, value) -> ExperimentSpec:
    """Return ``spec`` with ``section.key`` (or a top-level key) replaced."""
    head, _, rest = dotted_key.partition(".")
    hints = typing.get_type_hints(ExperimentSpec)
    if head not in hints:
        raise ConfigurationError(f"unknown config key {dotted_key!r}")
    if not rest:
        return dataclasses.replace(spec, **{head: _coerce(value, hints[head], dotted_key)})

    section = getattr(spec, head)
    if not dataclasses.is_dataclass(section):
        raise ConfigurationError(f"{head!r} has no sub-keys")
    section_hints = typing.get_type_hints(type(section))
    if rest not in section_hints:
        raise ConfigurationError(f"unknown config key {dotted_key!r}")
    updated = dataclasses.replace(
        section, **{rest: _coerce(value, section_hints[rest], dotted_key)}
    )
    return dataclasses.replace(spec, **{head: updated})
