"""Deterministic seed derivation from a single master seed."""

from __future__ import annotations

import hashlib

import numpy as np

U64_MAX = 2**64 - 1


def derive_seed(master: int, *parts: object) -> int:
    """Stable 64-bit seed for a named stage.

    ``derive_seed(7, "train", "dnn", "vehicle_a")`` always returns the same
    value on every platform: it is the first 8 bytes (little-endian) of the
    SHA-256 of ``"7/train/dnn/vehicle_a"``.
    """
    if not 0 <= int(master) <= U64_MAX:
        raise ValueError(f"master seed {master} is not an unsigned 64-bit integer")
    key = "/".join([str(int(master)), *(str(p) for p in parts)])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")


def rng(seed: int, *parts: object) -> np.random.Generator:
    """PCG64 generator; extra ``parts`` are folded in via :func:`derive_seed`."""
    if parts:
        seed = derive_seed(seed, *parts)
    return np.random.default_rng(np.random.SeedSequence(int(seed)))
