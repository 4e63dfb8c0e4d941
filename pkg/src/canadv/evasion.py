"""Gradient-sign evasion attacks (FGSM, BIM, PGD, R-FGSM) in feature space.

Every attack maximises the mean softmax cross-entropy of the surrogate
around the true labels, stays inside the L-infinity ball of radius ``eps``
around the clean input, and (by default) keeps features inside ``[0, 1]``.
``sign(0) == 0``: coordinates with an exactly zero gradient are not moved.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import IO, Any, Union

import numpy as np

from . import container
from .featurize import Dataset, Split, decode_dataset, encode_dataset
from .nnet import Network, cross_entropy_grad, forward, backward
from .zoo import ModelIdentity, TrainedModel

ADV_KIND = "adversarial_dataset"
DEFAULT_STEPS = 10
DEFAULT_ALPHA_RATIO = 0.25
BALL_TOL = 1e-9

Model = Union[TrainedModel, Network]


class AttackKind(str, Enum):
    FGSM = "fgsm"
    BIM = "bim"
    PGD = "pgd"
    RFGSM = "rfgsm"


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind
    eps: float
    alpha: float | None = None  # None -> eps * DEFAULT_ALPHA_RATIO
    steps: int = DEFAULT_STEPS
    rand_seed: int = 0
    clip_to_domain: bool = True
    random_start: bool = True  # PGD only

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if not self.eps >= 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.eps * DEFAULT_ALPHA_RATIO)
        if self.kind is not AttackKind.FGSM:
            if self.steps < 1:
                raise ValueError("steps must be >= 1")
            if self.eps > 0:
                if not 0 < self.alpha <= self.eps:
                    raise ValueError(f"{self.kind.value}: need 0 < alpha <= eps, got alpha={self.alpha}, eps={self.eps}")
                if self.kind is AttackKind.RFGSM and not self.alpha < self.eps:
                    raise ValueError("rfgsm: alpha must be strictly below eps")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "eps": self.eps,
            "alpha": self.alpha,
            "steps": self.steps,
            "rand_seed": self.rand_seed,
            "clip_to_domain": self.clip_to_domain,
            "random_start": self.random_start,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AttackConfig":
        return cls(
            AttackKind(d["kind"]), float(d["eps"]), float(d["alpha"]), int(d["steps"]), int(d["rand_seed"]),
            bool(d["clip_to_domain"]), bool(d.get("random_start", True)),
        )


def _network(model: Model) -> Network:
    return model.network if isinstance(model, TrainedModel) else model


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the input batch."""
    net = _network(model)
    logits, tape = forward(net, x)
    g = backward(tape, cross_entropy_grad(logits, y), want_params=False).inputs
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite input gradient")
    return g


def _domain(x: np.ndarray, clip: bool) -> np.ndarray:
    return np.clip(x, 0.0, 1.0) if clip else x


def _project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(x_adv, x - eps, x + eps)


def _prepare(model: Model, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    width = _network(model).input_width
    if x.ndim != 2 or x.shape[1] != width:
        raise AttackError(f"batch shape {x.shape} does not match model input width {width}")
    return x, y


def fgsm(model: Model, x, y, eps: float, clip: bool = True) -> np.ndarray:
    x, y = _prepare(model, x, y)
    if eps == 0:
        return x.copy()
    return _domain(x + eps * np.sign(input_gradient(model, x, y)), clip)


def _iterate(model, x, y, start, eps, alpha, steps, clip):
    adv = start
    for _ in range(steps):
        adv = adv + alpha * np.sign(input_gradient(model, adv, y))
        adv = _domain(_project(adv, x, eps), clip)
    return adv


def bim(model: Model, x, y, eps: float, alpha: float, steps: int, clip: bool = True) -> np.ndarray:
    x, y = _prepare(model, x, y)
    if eps == 0:
        return x.copy()
    return _iterate(model, x, y, x, eps, alpha, steps, clip)


def pgd(
    model: Model, x, y, eps: float, alpha: float, steps: int, rand_seed: int | np.random.Generator = 0,
    clip: bool = True, random_start: bool = True,
) -> np.ndarray:
    x, y = _prepare(model, x, y)
    if eps == 0:
        return x.copy()
    start = x
    if random_start:
        rng = _rng(rand_seed)
        start = _domain(x + rng.uniform(-eps, eps, size=x.shape), clip)
    return _iterate(model, x, y, start, eps, alpha, steps, clip)


def rfgsm_start(x: np.ndarray, eps: float, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Random first phase of R-FGSM: a signed Gaussian step of size eps - alpha."""
    return x + (eps - alpha) * np.sign(rng.standard_normal(x.shape))


def rfgsm(
    model: Model, x, y, eps: float, alpha: float, steps: int, rand_seed: int | np.random.Generator = 0,
    clip: bool = True,
) -> np.ndarray:
    x, y = _prepare(model, x, y)
    if eps == 0:
        return x.copy()
    start = rfgsm_start(x, eps, alpha, _rng(rand_seed))
    return _iterate(model, x, y, start, eps, alpha, steps, clip)


def _rng(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def perturb(model: Model, x, y, config: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply ``config`` to one batch. ``rng`` overrides ``config.rand_seed`` for chunked use."""
    r = rng if rng is not None else _rng(config.rand_seed)
    c = config
    if c.kind is AttackKind.FGSM:
        return fgsm(model, x, y, c.eps, c.clip_to_domain)
    if c.kind is AttackKind.BIM:
        return bim(model, x, y, c.eps, c.alpha, c.steps, c.clip_to_domain)
    if c.kind is AttackKind.PGD:
        return pgd(model, x, y, c.eps, c.alpha, c.steps, r, c.clip_to_domain, c.random_start)
    return rfgsm(model, x, y, c.eps, c.alpha, c.steps, r, c.clip_to_domain)


def max_perturbation(original: np.ndarray, perturbed: np.ndarray) -> float:
    if original.size == 0:
        return 0.0
    return float(np.max(np.abs(perturbed - original)))


# ---------------------------------------------------------- adversarial datasets


@dataclass(frozen=True, eq=False)
class AdversarialDataset:
    vehicle: str
    base_split: Split
    surrogate: ModelIdentity
    config: AttackConfig
    features: np.ndarray
    labels: np.ndarray
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        # Dataset performs shape/finite/label checks and freezes the arrays
        d = Dataset(self.vehicle, self.base_split, self.features, self.labels)
        object.__setattr__(self, "features", d.features)
        object.__setattr__(self, "labels", d.labels)
        object.__setattr__(self, "base_split", Split(self.base_split))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def name(self) -> str:
        return adversarial_name(self.config, self.surrogate)

    def as_dataset(self) -> Dataset:
        return Dataset(self.vehicle, self.base_split, self.features, self.labels, self.name)


def adversarial_name(config: AttackConfig, surrogate: ModelIdentity) -> str:
    name = f"{config.kind.value}_eps{config.eps:.3f}_{surrogate.architecture.value}_{surrogate.vehicle}"
    if surrogate.defense.value != "none":
        name += f"_{surrogate.defense.value}"
    return name


def check_eps_ball(original: Dataset, adv: AdversarialDataset) -> None:
    if adv.features.shape != original.features.shape or not np.array_equal(adv.labels, original.labels):
        raise AttackError(f"{adv.name}: rows or labels diverge from the base dataset")
    gap = max_perturbation(original.features, adv.features)
    if gap > adv.config.eps + BALL_TOL:
        raise AttackError(f"{adv.name}: max perturbation {gap} exceeds eps {adv.config.eps}")
    if adv.config.clip_to_domain and adv.features.size and (adv.features.min() < 0 or adv.features.max() > 1):
        raise AttackError(f"{adv.name}: features leave [0, 1]")


def craft_dataset(
    surrogate: TrainedModel, base: Dataset, config: AttackConfig, chunk_size: int = 256,
    provenance: dict[str, Any] | None = None,
) -> AdversarialDataset:
    """Attack every row of a test split against ``surrogate``."""
    if base.split is not Split.TEST:
        raise AttackError(f"adversarial datasets are crafted on test splits, got {base.split.value}")
    if base.features.shape[1] != surrogate.network.input_width:
        raise AttackError("surrogate input width does not match the dataset")
    rng = _rng(config.rand_seed)
    chunks = [
        perturb(surrogate, base.features[i : i + chunk_size], base.labels[i : i + chunk_size], config, rng)
        for i in range(0, len(base), chunk_size)
    ]
    x_adv = np.concatenate(chunks) if chunks else base.features.copy()
    prov = {"base": base.provenance, **(provenance or {})}
    adv = AdversarialDataset(base.vehicle, base.split, surrogate.identity, config, x_adv, base.labels, prov)
    check_eps_ball(base, adv)
    return adv


def encode_adversarial(adv: AdversarialDataset) -> bytes:
    extra = {"surrogate": adv.surrogate.to_dict(), "attack": adv.config.to_dict(), "adv_provenance": adv.provenance}
    return encode_dataset(adv.as_dataset(), kind=ADV_KIND, extra=extra)


def decode_adversarial(blob: bytes) -> AdversarialDataset:
    d, meta = decode_dataset(blob, kind=ADV_KIND)
    return AdversarialDataset(
        d.vehicle, d.split, ModelIdentity.from_dict(meta["surrogate"]), AttackConfig.from_dict(meta["attack"]),
        d.features, d.labels, meta["adv_provenance"],
    )


def save_adversarial(adv: AdversarialDataset, sink: str | os.PathLike | IO[bytes]) -> None:
    container.dump(sink, encode_adversarial(adv))


def load_adversarial(source: str | os.PathLike | IO[bytes] | bytes) -> AdversarialDataset:
    return decode_adversarial(container.slurp(source))
