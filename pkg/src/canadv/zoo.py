"""The three IDS architectures, the baseline training loop, and checkpoints."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import IO, Any, Callable

import numpy as np

from . import container
from .featurize import N_CLASSES, N_FEATURES, Dataset
from .nnet import (
    AdamState,
    Conv1d,
    Dense,
    Flatten,
    GraphError,
    Lstm,
    MaxPool1d,
    Network,
    Relu,
    TakeLastStep,
    adam_step,
    build_network,
    cross_entropy,
    layer_from_dict,
    layer_to_dict,
    loss_and_gradients,
    parameter_shapes,
)

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"
CHECKPOINT_FORMAT_VERSION = 1
HIDDEN = 64
CONV_CHANNELS = 32
CONV_KERNEL = 3


class ModelArchitecture(str, Enum):
    DNN = "dnn"
    CNN = "cnn"
    LSTM = "lstm"


class Defense(str, Enum):
    NONE = "none"
    FINE_TUNED = "fine_tuned"
    ADAPTIVE_ONLINE = "adaptive_online"


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        where = "" if epoch is None else f" (epoch {epoch}, batch {batch})"
        super().__init__(message + where)
        self.epoch = epoch
        self.batch = batch


class CheckpointError(container.ContainerError):
    pass


class CheckpointVersionError(CheckpointError, container.FormatVersionError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError, container.TruncatedError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.001
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict[str, Any]:
        return {**asdict(self), "loss": "softmax_cross_entropy", "optimizer": "adam"}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        return cls(int(d["epochs"]), float(d["lr"]), int(d["batch_size"]), int(d["seed"]))


@dataclass(frozen=True, order=True)
class ModelIdentity:
    architecture: ModelArchitecture
    vehicle: str
    defense: Defense = Defense.NONE

    def __str__(self) -> str:
        tag = "" if self.defense == Defense.NONE else f"+{self.defense.value}"
        return f"{self.architecture.value}@{self.vehicle}{tag}"

    def to_dict(self) -> dict[str, str]:
        return {"architecture": self.architecture.value, "vehicle": self.vehicle, "defense": self.defense.value}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelIdentity":
        return cls(ModelArchitecture(d["architecture"]), d["vehicle"], Defense(d.get("defense", "none")))


def architecture_layers(arch: ModelArchitecture, input_width: int = N_FEATURES, classes: int = N_CLASSES) -> tuple:
    arch = ModelArchitecture(arch)
    if arch is ModelArchitecture.DNN:
        return (Dense(input_width, HIDDEN), Relu(), Dense(HIDDEN, classes))
    if arch is ModelArchitecture.CNN:
        conv_len = input_width - CONV_KERNEL + 1
        flat = CONV_CHANNELS * (conv_len // 2)
        return (Conv1d(1, CONV_CHANNELS, CONV_KERNEL), Relu(), MaxPool1d(2), Flatten(), Dense(flat, classes))
    return (Lstm(1, HIDDEN), TakeLastStep(), Dense(HIDDEN, classes))


def build(arch: ModelArchitecture, input_width: int = N_FEATURES, classes: int = N_CLASSES, seed: int = 0) -> Network:
    return build_network(architecture_layers(arch, input_width, classes), input_width, seed)


@dataclass(frozen=True, eq=False)
class TrainedModel:
    architecture: ModelArchitecture
    network: Network
    trained_on_vehicle: str
    config: TrainConfig
    defense: Defense = Defense.NONE
    defense_config: dict[str, Any] | None = None
    history: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "architecture", ModelArchitecture(self.architecture))
        object.__setattr__(self, "defense", Defense(self.defense))
        if not self.trained_on_vehicle:
            raise ValueError("trained_on_vehicle must be non-empty")
        if not self.provenance:
            raise ValueError("provenance must be non-empty")
        expected = parameter_shapes(architecture_layers(self.architecture, self.network.input_width), self.network.input_width)
        actual = {k: v.shape for k, v in self.network.params.items()}
        if expected != actual:
            raise GraphError(f"parameters do not match the {self.architecture.value} template")

    @property
    def identity(self) -> ModelIdentity:
        return ModelIdentity(self.architecture, self.trained_on_vehicle, self.defense)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.network.logits(x)

    def predict(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = [self.network.predict(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# --------------------------------------------------------------------- training


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Row order for one epoch, drawn from a seed derived from (seed, epoch)."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


def dataset_loss(network: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 1024) -> float:
    total = 0.0
    for i in range(0, len(y), batch_size):
        xb, yb = x[i : i + batch_size], y[i : i + batch_size]
        total += cross_entropy(network.logits(xb), yb) * len(yb)
    return total / max(len(y), 1)


StepHook = Callable[[int, int, Network, np.ndarray, np.ndarray], None]


def fit(
    network: Network,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    state: AdamState | None = None,
    extra_steps: Callable[[int, int, Network, AdamState, np.ndarray, np.ndarray], tuple[Network, AdamState]] | None = None,
) -> tuple[Network, AdamState, dict[str, Any]]:
    """Mini-batch Adam over ``(x, y)`` for ``cfg.epochs`` epochs.

    ``extra_steps(epoch, batch, network, state, xb, yb)`` runs after the clean
    update of every batch and may perform further updates (used by the
    adaptive online defense). Epoch and batch indices passed to it are 1-based.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if n == 0:
        raise TrainingError("empty training set")
    if state is None:
        state = AdamState.zeros_like(network.params, lr=cfg.lr)
    n_batches = math.ceil(n / cfg.batch_size)
    initial = dataset_loss(network, x, y)
    epoch_losses = []
    for epoch in range(1, cfg.epochs + 1):
        order = epoch_order(n, cfg.seed, epoch)
        running = 0.0
        for b in range(n_batches):
            rows = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb, yb = x[rows], y[rows]
            loss, grads = loss_and_gradients(network, xb, yb)
            if not math.isfinite(loss):
                raise TrainingError("non-finite training loss", epoch, b + 1)
            params, state = adam_step(network.params, grads.params, state)
            network = network.with_params(params)
            running += loss * len(rows)
            if extra_steps is not None:
                network, state = extra_steps(epoch, b + 1, network, state, xb, yb)
        epoch_losses.append(running / n)
        log.debug("epoch %d/%d loss %.5f", epoch, cfg.epochs, epoch_losses[-1])
    history = {
        "initial_loss": initial,
        "epoch_losses": epoch_losses,
        "final_loss": dataset_loss(network, x, y),
        "adam_steps": state.step_count,
        "batches_per_epoch": n_batches,
    }
    return network, state, history


def _check_trainable(train_set: Dataset) -> None:
    if train_set.features.shape[1] != N_FEATURES:
        raise ValueError(f"training data must have width {N_FEATURES}")
    counts = train_set.class_counts()
    if counts.min() != counts.max():
        raise ValueError(f"training set is not balanced: class counts {counts.tolist()}")


def train(arch: ModelArchitecture, train_set: Dataset, cfg: TrainConfig, vehicle: str | None = None) -> TrainedModel:
    """Baseline training: Adam on softmax cross-entropy from a seeded initialisation."""
    _check_trainable(train_set)
    arch = ModelArchitecture(arch)
    network = build(arch, seed=cfg.seed)
    network, _, history = fit(network, train_set.features, train_set.labels, cfg)
    return TrainedModel(
        arch, network, vehicle or train_set.vehicle, cfg, history=history, provenance=training_provenance(train_set)
    )


def training_provenance(train_set: Dataset) -> dict[str, Any]:
    return {
        "train_set": train_set.provenance or f"{train_set.vehicle}/{train_set.split.value}",
        "train_rows": len(train_set),
        "train_vehicle": train_set.vehicle,
    }


# ------------------------------------------------------------------ checkpoints


def encode_checkpoint(model: TrainedModel) -> bytes:
    meta = {
        "architecture": model.architecture.value,
        "trained_on_vehicle": model.trained_on_vehicle,
        "defense": model.defense.value,
        "defense_config": model.defense_config,
        "train_config": model.config.to_dict(),
        "input_width": model.network.input_width,
        "layers": [layer_to_dict(layer) for layer in model.network.layers],
        "history": model.history,
        "provenance": model.provenance,
    }
    return container.encode(CHECKPOINT_KIND, model.format_version, meta, model.network.params)


def decode_checkpoint(blob: bytes) -> TrainedModel:
    try:
        meta, arrays = container.decode(blob, CHECKPOINT_KIND, CHECKPOINT_FORMAT_VERSION)
    except container.FormatVersionError as exc:
        raise CheckpointVersionError(str(exc)) from None
    except container.TruncatedError as exc:
        raise CheckpointTruncatedError(str(exc)) from None
    arch = ModelArchitecture(meta["architecture"])
    width = int(meta["input_width"])
    layers = tuple(layer_from_dict(d) for d in meta["layers"])
    if layers != architecture_layers(arch, width):
        raise CheckpointShapeError(f"stored layer list does not match the {arch.value} architecture")
    expected = parameter_shapes(layers, width)
    if list(expected) != list(arrays):
        raise CheckpointShapeError(f"parameter names {list(arrays)} != expected {list(expected)}")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointShapeError(f"parameter {name}: stored {arrays[name].shape}, expected {shape}")
    return TrainedModel(
        arch,
        Network(layers, arrays, width),
        meta["trained_on_vehicle"],
        TrainConfig.from_dict(meta["train_config"]),
        Defense(meta["defense"]),
        meta["defense_config"],
        meta["history"],
        meta["provenance"],
    )


def save(model: TrainedModel, sink: str | os.PathLike | IO[bytes]) -> None:
    container.dump(sink, encode_checkpoint(model))


def load(source: str | os.PathLike | IO[bytes] | bytes) -> TrainedModel:
    return decode_checkpoint(container.slurp(source))
