"""Whole-trainer checkpoints, enough to resume a run bit for bit."""
from __future__ import annotations

import copy
import logging
from pathlib import Path

import numpy as np
import yaml

from aglp._config import TrainerConfig, to_dict
from aglp._errors import ConfigurationError
from aglp._files import read_arrays, write_arrays
from aglp._losses import SOURCE, TARGET, CentroidState
from aglp._model import load_checkpoint, save_checkpoint
from aglp._prototypes import PrototypeSet
from aglp._tensor import Tensor
from aglp._trainer import Sgd, TrainerState

logger = logging.getLogger(__name__)

STATE_FILE = "state.yaml"
BUFFERS_FILE = "buffers.csv"


def _generator_state(rng: np.random.Generator) -> dict:
    return copy.deepcopy(rng.bit_generator.state)


def _restore_generator(saved: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    if rng.bit_generator.state["bit_generator"] != saved.get("bit_generator"):
        raise ConfigurationError(f"unsupported bit generator {saved.get('bit_generator')!r}")
    rng.bit_generator.state = saved
    return rng


def save_state(state: TrainerState, directory: Path) -> None:
    """Weights, optimizer velocities, centroids, pseudo centers, step and RNG streams."""
    save_checkpoint(state.model, directory)

    buffers: dict[str, np.ndarray] = {}
    for name, velocity in state.optimizer.velocity.items():
        buffers[f"velocity/{name}"] = velocity
    for domain in (SOURCE, TARGET):
        for k, centroid in sorted(state.centroids.centroids(domain).items()):
            buffers[f"centroid/{domain}/{k}"] = centroid.numpy()
    if state.pseudo_centers is not None:
        buffers["pseudo_centers"] = state.pseudo_centers.centers
    write_arrays(directory / BUFFERS_FILE, buffers)

    header = {
        "step": state.step,
        "schedule_origin": state.schedule_origin,
        "batch_rng": _generator_state(state.batch_rng),
        "dropout_rng": _generator_state(state.dropout_rng),
        "source_counts": {int(k): int(v) for k, v in state.centroids.source_counts.items()},
        "target_counts": {int(k): int(v) for k, v in state.centroids.target_counts.items()},
        "trainer": to_dict(state.config),
    }
    with open(directory / STATE_FILE, "w", encoding="utf-8") as f:
        yaml.safe_dump(header, f, sort_keys=False)
    logger.debug("saved trainer state at step %d to %s", state.step, directory)


def load_state(directory: Path, config: TrainerConfig) -> TrainerState:
    """Rebuild the trainer state saved by :func:`save_state` under ``config``."""
    path = directory / STATE_FILE
    if not path.is_file():
        raise ConfigurationError(f"no trainer state at {directory}")
    with open(path, encoding="utf-8") as f:
        header = yaml.safe_load(f)

    model = load_checkpoint(directory)
    if model.use_saa != config.use_saa:
        raise ConfigurationError(
            f"checkpoint was trained with use_saa={model.use_saa}, config says {config.use_saa}"
        )
    buffers = read_arrays(directory / BUFFERS_FILE)

    optimizer = Sgd(config.momentum, config.weight_decay)
    centroids = {SOURCE: {}, TARGET: {}}
    pseudo_centers = None
    for name, array in buffers.items():
        kind, _, rest = name.partition("/")
        if kind == "velocity":
            optimizer.velocity[rest] = array
        elif kind == "centroid":
            domain, _, k = rest.partition("/")
            centroids[domain][int(k)] = Tensor(array)
        elif kind == "pseudo_centers":
            pseudo_centers = PrototypeSet(
                array, config.proto_temperature, config.temperature_mode
            )
        else:
            raise ConfigurationError(f"unexpected buffer {name!r} in {directory / BUFFERS_FILE}")

    centroid_state = CentroidState(
        model.num_classes,
        model.fused_dim,
        momentum=config.centroid_momentum,
        source=centroids[SOURCE],
        target=centroids[TARGET],
        source_counts={int(k): v for k, v in header["source_counts"].items()},
        target_counts={int(k): v for k, v in header["target_counts"].items()},
    )
    return TrainerState(
        config=config,
        model=model,
        optimizer=optimizer,
        centroids=centroid_state,
        batch_rng=_restore_generator(header["batch_rng"]),
        dropout_rng=_restore_generator(header["dropout_rng"]),
        step=header["step"],
        schedule_origin=header["schedule_origin"],
        pseudo_centers=pseudo_centers,
    )
