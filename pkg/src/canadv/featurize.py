"""Frame -> feature-vector conversion, class balancing and stratified splits.

Each frame becomes 77 values in [0, 1]:

====== ==========================================================
index  content
====== ==========================================================
0-10   CAN id bits, most significant first
11     dlc / 8
12-75  payload bits, byte by byte, MSB first; absent bytes are 0
76     time since the previous frame with the same id, clamped to
       ``[0, interval_cap]`` and divided by ``interval_cap``;
       1.0 for the first frame of an id
====== ==========================================================
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Any, Sequence

import numpy as np

from . import container
from .canlog import CanFrame, TrafficClass

N_FEATURES = 77
N_CLASSES = len(TrafficClass)
ID_BITS = slice(0, 11)
DLC_COL = 11
PAYLOAD_BITS = slice(12, 76)
INTERVAL_COL = 76

DATASET_KIND = "dataset"
DATASET_FORMAT_VERSION = 1


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"
    FULL = "full"


class OrderingError(ValueError):
    pass


class BalanceError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    vehicle: str
    split: Split
    features: np.ndarray
    labels: np.ndarray
    provenance: str = ""
    seed: int | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[1] != N_FEATURES:
            raise ValueError(f"features must be n x {N_FEATURES}, got {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError(f"{x.shape[0]} feature rows but {y.shape} labels")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain non-finite values")
        if y.size and (y.min() < 0 or y.max() >= N_CLASSES):
            raise ValueError("labels outside 0..3")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "split", Split(self.split))

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=N_CLASSES)

    def take(self, rows: np.ndarray, split: Split | None = None, provenance: str | None = None) -> "Dataset":
        return Dataset(
            self.vehicle,
            split if split is not None else self.split,
            self.features[rows],
            self.labels[rows],
            provenance if provenance is not None else self.provenance,
            self.seed,
            dict(self.meta),
        )


def extract_features(frames: Sequence[CanFrame], interval_cap: float = 1.0, vehicle: str = "unknown") -> Dataset:
    if not interval_cap > 0:
        raise ValueError("interval_cap must be > 0")
    n = len(frames)
    times = np.fromiter((f.timestamp for f in frames), dtype=np.float64, count=n)
    if n > 1:
        back = np.flatnonzero(np.diff(times) < 0)
        if back.size:
            i = int(back[0]) + 1
            raise OrderingError(f"frame {i} at t={times[i]} precedes frame {i - 1} at t={times[i - 1]}")
    ids = np.fromiter((f.can_id for f in frames), dtype=np.int64, count=n)
    dlc = np.fromiter((f.dlc for f in frames), dtype=np.int64, count=n)
    payload = np.zeros((n, 8), dtype=np.uint8)
    for i, f in enumerate(frames):
        payload[i, : f.dlc] = np.frombuffer(f.payload, dtype=np.uint8)

    x = np.empty((n, N_FEATURES), dtype=np.float64)
    x[:, ID_BITS] = (ids[:, None] >> np.arange(10, -1, -1)) & 1
    x[:, DLC_COL] = dlc / 8.0
    x[:, PAYLOAD_BITS] = np.unpackbits(payload, axis=1)

    interval = np.ones(n)
    last_seen: dict[int, float] = {}
    for i in range(n):
        cid = int(ids[i])
        prev = last_seen.get(cid)
        if prev is not None:
            interval[i] = min(max(times[i] - prev, 0.0), interval_cap) / interval_cap
        last_seen[cid] = times[i]
    x[:, INTERVAL_COL] = interval

    labels = np.fromiter((int(f.label) for f in frames), dtype=np.int64, count=n)
    return Dataset(vehicle, Split.FULL, x, labels, f"extract_features(interval_cap={interval_cap!r})",
                   meta={"interval_cap": interval_cap})


def balance(d: Dataset, seed: int) -> Dataset:
    """Undersample every class to the size of the rarest one."""
    counts = d.class_counts()
    for cls in TrafficClass:
        if counts[cls] == 0:
            raise BalanceError(f"class {cls.name} has no rows in {d.vehicle}")
    m = int(counts.min())
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    chosen = [rng.choice(np.flatnonzero(d.labels == cls), size=m, replace=False) for cls in TrafficClass]
    rows = rng.permutation(np.concatenate(chosen))
    out = d.take(rows, provenance=f"{d.provenance}; balance(seed={seed})")
    return out


def split(d: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split: per class, floor(fraction * count) rows go to train."""
    if not 0 < train_fraction < 1:
        raise SplitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    counts = d.class_counts()
    for cls in TrafficClass:
        if counts[cls] < 2:
            raise SplitError(f"class {cls.name} has {counts[cls]} rows; at least 2 needed to split")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    train_rows, test_rows = [], []
    for cls in TrafficClass:
        idx = rng.permutation(np.flatnonzero(d.labels == cls))
        k = int(np.floor(train_fraction * len(idx)))
        train_rows.append(idx[:k])
        test_rows.append(idx[k:])
    train_idx = rng.permutation(np.concatenate(train_rows))
    test_idx = rng.permutation(np.concatenate(test_rows))
    tag = f"split(train_fraction={train_fraction!r}, seed={seed})"
    return (
        d.take(train_idx, Split.TRAIN, f"{d.provenance}; {tag}"),
        d.take(test_idx, Split.TEST, f"{d.provenance}; {tag}"),
    )


# ------------------------------------------------------------------ persistence


def dataset_header(d: Dataset) -> dict[str, Any]:
    return {
        "vehicle": d.vehicle,
        "split": d.split.value,
        "n": len(d),
        "width": N_FEATURES,
        "seed": d.seed,
        "provenance": d.provenance,
        "extra": d.meta,
    }


def encode_dataset(d: Dataset, kind: str = DATASET_KIND, extra: dict[str, Any] | None = None) -> bytes:
    header = dataset_header(d)
    if extra:
        header.update(extra)
    return container.encode(kind, DATASET_FORMAT_VERSION, header, {"features": d.features, "labels": d.labels})


def decode_dataset(blob: bytes, kind: str = DATASET_KIND) -> tuple[Dataset, dict[str, Any]]:
    meta, arrays = container.decode(blob, kind, DATASET_FORMAT_VERSION)
    x, y = arrays["features"], arrays["labels"]
    if x.shape != (meta["n"], meta["width"]) or meta["width"] != N_FEATURES:
        raise container.ContainerError(f"declared shape ({meta['n']}, {meta['width']}) != stored {x.shape}")
    d = Dataset(meta["vehicle"], Split(meta["split"]), x, y, meta["provenance"], meta["seed"], meta.get("extra", {}))
    return d, meta


def save_dataset(d: Dataset, sink: str | os.PathLike | IO[bytes]) -> None:
    container.dump(sink, encode_dataset(d))


def load_dataset(source: str | os.PathLike | IO[bytes] | bytes) -> Dataset:
    return decode_dataset(container.slurp(source))[0]
