"""Adversarial fine-tuning and adaptive online adversarial training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

import numpy as np

from .evasion import DEFAULT_ALPHA_RATIO, DEFAULT_STEPS, AttackConfig, AttackKind, perturb
from .featurize import Dataset
from .nnet import AdamState, Network, adam_step, loss_and_gradients
from .seeding import derive_seed
from .zoo import (
    Defense,
    ModelArchitecture,
    TrainConfig,
    TrainedModel,
    TrainingError,
    _check_trainable,
    training_provenance,
    build,
    fit,
)

log = logging.getLogger(__name__)


class ScheduleUnit(str, Enum):
    EPOCH = "epoch"
    BATCH = "batch"


class DefenseMode(str, Enum):
    FINE_TUNE = "fine_tune"
    ADAPTIVE_ONLINE = "adaptive_online"


class DefenseConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EpsSchedule:
    """Linear ramp: eps_i = eps_max * i / total_units for i = 1..total_units."""

    eps_max: float
    total_units: int
    unit: ScheduleUnit = ScheduleUnit.EPOCH

    def __post_init__(self):
        object.__setattr__(self, "unit", ScheduleUnit(self.unit))
        if not self.eps_max > 0:
            raise ValueError("eps_max must be > 0")
        if self.total_units < 1:
            raise ValueError("total_units must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {"eps_max": self.eps_max, "total_units": self.total_units, "unit": self.unit.value}


def eps_at(schedule: EpsSchedule, i: int) -> float:
    if not 1 <= i <= schedule.total_units:
        raise ValueError(f"ramp index {i} outside 1..{schedule.total_units}")
    # i / total is exactly 1.0 at the end of the ramp, so the endpoint is exactly eps_max
    return schedule.eps_max * (i / schedule.total_units)


ALL_ATTACKS = tuple(AttackKind)


@dataclass(frozen=True)
class DefenseConfig:
    mode: DefenseMode
    attacks: tuple[AttackKind, ...] = ALL_ATTACKS
    schedule: EpsSchedule | None = None
    finetune_epochs: int = 10
    eps_set: tuple[float, ...] = (0.1, 0.2, 0.3)
    seed: int = 0
    steps: int = DEFAULT_STEPS
    clean_replay: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", DefenseMode(self.mode))
        object.__setattr__(self, "attacks", tuple(AttackKind(a) for a in self.attacks))
        object.__setattr__(self, "eps_set", tuple(float(e) for e in self.eps_set))
        if not self.attacks:
            raise DefenseConfigError("attacks must not be empty")
        if any(not e > 0 for e in self.eps_set):
            raise DefenseConfigError("eps values must be > 0")
        if self.mode is DefenseMode.FINE_TUNE:
            if not self.eps_set:
                raise DefenseConfigError("fine-tuning needs at least one eps value")
            if self.finetune_epochs < 1:
                raise DefenseConfigError("finetune_epochs must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode.value,
            "attacks": [a.value for a in self.attacks],
            "schedule": None if self.schedule is None else self.schedule.to_dict(),
            "finetune_epochs": self.finetune_epochs,
            "eps_set": list(self.eps_set),
            "seed": self.seed,
            "steps": self.steps,
            "clean_replay": self.clean_replay,
        }


def _attack_config(kind: AttackKind, eps: float, steps: int, seed: int) -> AttackConfig:
    return AttackConfig(kind, eps, alpha=eps * DEFAULT_ALPHA_RATIO, steps=steps, rand_seed=seed)


def adversarial_corpus(
    model: TrainedModel | Network, train_set: Dataset, cfg: DefenseConfig, chunk_size: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Attack the training rows against ``model`` for every (attack, eps) pair."""
    xs, ys = [], []
    x, y = train_set.features, train_set.labels
    for kind in cfg.attacks:
        for eps in cfg.eps_set:
            ac = _attack_config(kind, eps, cfg.steps, derive_seed(cfg.seed, "finetune", kind.value, repr(eps)))
            rng = np.random.default_rng(np.random.SeedSequence(ac.rand_seed))
            for i in range(0, len(y), chunk_size):
                xs.append(perturb(model, x[i : i + chunk_size], y[i : i + chunk_size], ac, rng))
                ys.append(y[i : i + chunk_size])
    if not xs:
        raise DefenseConfigError("empty adversarial corpus")
    return np.concatenate(xs), np.concatenate(ys)


def finetune(model: TrainedModel, train_set: Dataset, cfg: DefenseConfig) -> TrainedModel:
    """Continue training ``model`` on adversarial versions of its own training split."""
    if cfg.mode is not DefenseMode.FINE_TUNE:
        raise DefenseConfigError("finetune() needs a FINE_TUNE config")
    _check_trainable(train_set)
    x_adv, y_adv = adversarial_corpus(model, train_set, cfg)
    if cfg.clean_replay:
        x_adv = np.concatenate([x_adv, train_set.features])
        y_adv = np.concatenate([y_adv, train_set.labels])
    order = np.random.default_rng(np.random.SeedSequence(derive_seed(cfg.seed, "finetune-shuffle"))).permutation(len(y_adv))
    x_adv, y_adv = x_adv[order], y_adv[order]
    train_cfg = TrainConfig(
        epochs=cfg.finetune_epochs, lr=model.config.lr, batch_size=model.config.batch_size,
        seed=derive_seed(cfg.seed, "finetune-epochs"),
    )
    network, _, history = fit(model.network, x_adv, y_adv, train_cfg)
    history = {**history, "corpus_rows": int(len(y_adv)), "pretraining": model.history}
    return TrainedModel(
        model.architecture, network, model.trained_on_vehicle, model.config, Defense.FINE_TUNED,
        cfg.to_dict(), history, {**model.provenance, "finetune_set": training_provenance(train_set)},
    )


def adaptive_online_train(
    arch: ModelArchitecture, train_set: Dataset, train_cfg: TrainConfig, cfg: DefenseConfig,
    vehicle: str | None = None,
) -> TrainedModel:
    """Train from scratch; after each clean batch update, attack the same batch
    against the current weights with every configured attack at the ramped eps
    and take one Adam step per attack. One optimizer state serves all steps."""
    if cfg.mode is not DefenseMode.ADAPTIVE_ONLINE:
        raise DefenseConfigError("adaptive_online_train() needs an ADAPTIVE_ONLINE config")
    _check_trainable(train_set)
    n_batches = -(-len(train_set) // train_cfg.batch_size)
    schedule = cfg.schedule or EpsSchedule(0.3, train_cfg.epochs, ScheduleUnit.EPOCH)
    expected = train_cfg.epochs if schedule.unit is ScheduleUnit.EPOCH else n_batches
    if schedule.total_units != expected:
        raise DefenseConfigError(
            f"{schedule.unit.value} schedule has {schedule.total_units} units; training has {expected}"
        )
    cfg = replace(cfg, schedule=schedule)

    def attack_steps(epoch, batch, network, state, xb, yb):
        i = epoch if schedule.unit is ScheduleUnit.EPOCH else batch
        eps = eps_at(schedule, i)
        for kind in cfg.attacks:
            ac = _attack_config(kind, eps, cfg.steps, derive_seed(cfg.seed, "online", epoch, batch, kind.value))
            x_adv = perturb(network, xb, yb, ac)
            loss, grads = loss_and_gradients(network, x_adv, yb)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite adversarial loss ({kind.value})", epoch, batch)
            params, state = adam_step(network.params, grads.params, state)
            network = network.with_params(params)
        return network, state

    network = build(arch, seed=train_cfg.seed)
    network, state, history = fit(network, train_set.features, train_set.labels, train_cfg, extra_steps=attack_steps)
    history["steps_per_epoch"] = (1 + len(cfg.attacks)) * n_batches
    return TrainedModel(
        ModelArchitecture(arch), network, vehicle or train_set.vehicle, train_cfg, Defense.ADAPTIVE_ONLINE,
        cfg.to_dict(), history, training_provenance(train_set),
    )
