"""Labeled CAN traffic: frame type, CSV log reader/writer, synthetic generator.

Log lines look like::

    0.000000,0545,8,D8 00 00 8A 00 00 00 00,R
    1.500000,0000,2,FF FF,T_FLOOD

i.e. ``timestamp,hex_id,dlc,space-separated hex bytes,label`` with labels
``R`` (normal), ``T_FLOOD``, ``T_FUZZY`` and ``T_MALF``. Blank lines and lines
starting with ``#`` are skipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

MAX_CAN_ID = 0x7FF


class TrafficClass(IntEnum):
    NORMAL = 0
    FLOODING = 1
    FUZZY = 2
    MALFUNCTION = 3


LABEL_CODES = {
    TrafficClass.NORMAL: "R",
    TrafficClass.FLOODING: "T_FLOOD",
    TrafficClass.FUZZY: "T_FUZZY",
    TrafficClass.MALFUNCTION: "T_MALF",
}
_CODE_TO_CLASS = {code: cls for cls, code in LABEL_CODES.items()}


class FrameError(ValueError):
    pass


class LogParseError(ValueError):
    """A log line could not be decoded.

    ``lineno`` is 1-based; ``field`` names the offending column.
    """

    def __init__(self, lineno: int, field: str, message: str):
        super().__init__(f"line {lineno}: {field}: {message}")
        self.lineno = lineno
        self.field = field


class LogStructureError(LogParseError):
    """Fields decode individually but disagree with each other (dlc vs payload)."""


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class CanFrame:
    timestamp: float
    can_id: int
    dlc: int
    payload: bytes
    label: TrafficClass = TrafficClass.NORMAL

    def __post_init__(self):
        if not (math.isfinite(self.timestamp) and self.timestamp >= 0):
            raise FrameError(f"timestamp must be finite and >= 0, got {self.timestamp!r}")
        if not 0 <= self.can_id <= MAX_CAN_ID:
            raise FrameError(f"can_id {self.can_id:#x} outside the 11-bit range")
        if not 0 <= self.dlc <= 8:
            raise FrameError(f"dlc {self.dlc} outside 0..8")
        if len(self.payload) != self.dlc:
            raise FrameError(f"payload has {len(self.payload)} bytes but dlc is {self.dlc}")
        object.__setattr__(self, "payload", bytes(self.payload))
        object.__setattr__(self, "label", TrafficClass(self.label))


# --------------------------------------------------------------------------- I/O


def _parse_line(line: str, lineno: int) -> CanFrame:
    parts = line.split(",")
    if len(parts) != 5:
        raise LogParseError(lineno, "line", f"expected 5 comma-separated fields, got {len(parts)}")
    ts_s, id_s, dlc_s, data_s, label_s = (p.strip() for p in parts)
    try:
        ts = float(ts_s)
    except ValueError:
        raise LogParseError(lineno, "timestamp", f"not a number: {ts_s!r}") from None
    if not (math.isfinite(ts) and ts >= 0):
        raise LogParseError(lineno, "timestamp", f"must be finite and non-negative: {ts_s!r}")
    try:
        can_id = int(id_s, 16)
    except ValueError:
        raise LogParseError(lineno, "can_id", f"not hexadecimal: {id_s!r}") from None
    if not 0 <= can_id <= MAX_CAN_ID or id_s.startswith(("-", "+")):
        raise LogParseError(lineno, "can_id", f"{id_s!r} is not an 11-bit identifier")
    if not dlc_s.isdigit():
        raise LogParseError(lineno, "dlc", f"not a non-negative integer: {dlc_s!r}")
    dlc = int(dlc_s)
    if dlc > 8:
        raise LogParseError(lineno, "dlc", f"{dlc} exceeds 8")
    tokens = data_s.split()
    try:
        if any(len(tok) != 2 for tok in tokens):
            raise ValueError
        payload = bytes(int(tok, 16) for tok in tokens)
    except ValueError:
        raise LogParseError(lineno, "payload", f"bytes must be two hex digits each: {data_s!r}") from None
    if len(payload) != dlc:
        raise LogStructureError(lineno, "payload", f"dlc is {dlc} but {len(payload)} bytes given")
    try:
        label = _CODE_TO_CLASS[label_s]
    except KeyError:
        raise LogParseError(lineno, "label", f"unknown label {label_s!r}") from None
    return CanFrame(ts, can_id, dlc, payload, label)


def parse_log(stream: Iterable[str]) -> list[CanFrame]:
    """Decode a CSV log (any iterable of lines, e.g. an open text file)."""
    frames = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        frames.append(_parse_line(line, lineno))
    return frames


def format_frame(frame: CanFrame) -> str:
    data = " ".join(f"{b:02X}" for b in frame.payload)
    return f"{frame.timestamp!r},{frame.can_id:04X},{frame.dlc},{data},{LABEL_CODES[frame.label]}"


def write_log(frames: Iterable[CanFrame], sink: IO[str], header: Sequence[str] = ()) -> None:
    """Write frames in the CSV log format. Optional ``header`` lines are emitted as ``#`` comments."""
    for line in header:
        sink.write(f"# {line}\n")
    for frame in frames:
        sink.write(format_frame(frame))
        sink.write("\n")


def read_log(path: str | Path) -> list[CanFrame]:
    with open(path, encoding="utf-8", newline="\n") as fh:
        return parse_log(fh)


def parse_survival(stream: Iterable[str], attack: TrafficClass) -> list[CanFrame]:
    """Adapter for per-attack captures in the public car-hacking CSV layout.

    Accepts ``timestamp,id,dlc,b0,...,b{dlc-1},flag`` as well as the native
    single-field payload. Flag ``R`` maps to NORMAL, ``T`` to ``attack``.
    Not validated against the original dataset documentation.
    """
    frames = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line[0].isalpha():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) < 4:
            raise LogParseError(lineno, "line", "too few fields")
        flag = parts[-1]
        if flag not in ("R", "T"):
            raise LogParseError(lineno, "label", f"unknown flag {flag!r}")
        data = " ".join(parts[3:-1])
        code = LABEL_CODES[TrafficClass.NORMAL if flag == "R" else attack]
        frames.append(_parse_line(",".join([parts[0], parts[1], parts[2], data, code]), lineno))
    return frames


# -------------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class IdSpec:
    """One periodic ECU message: identifier, period in seconds, payload template."""

    can_id: int
    period: float
    template: bytes

    def __post_init__(self):
        if not 0 < self.can_id <= MAX_CAN_ID:
            raise ValueError(f"pool id {self.can_id:#x} must be in 1..0x7FF")
        if not self.period > 0:
            raise ValueError(f"period must be > 0 for id {self.can_id:#x}")
        if len(self.template) > 8:
            raise ValueError("template longer than 8 bytes")
        object.__setattr__(self, "template", bytes(self.template))


@dataclass(frozen=True)
class SynthProfile:
    vehicle_name: str
    normal_id_pool: tuple[IdSpec, ...]
    attack_mix: Mapping[TrafficClass, float]
    duration: float
    rng_seed: int
    malfunction_id: int | None = None
    jitter: float = 0.05
    flood_burst: int = 200

    def __post_init__(self):
        object.__setattr__(self, "normal_id_pool", tuple(self.normal_id_pool))
        mix = {TrafficClass(k): float(v) for k, v in dict(self.attack_mix).items()}
        mix = {cls: mix.get(cls, 0.0) for cls in TrafficClass}
        object.__setattr__(self, "attack_mix", mix)
        if not self.normal_id_pool:
            raise ValueError("normal_id_pool must not be empty")
        if len({s.can_id for s in self.normal_id_pool}) != len(self.normal_id_pool):
            raise ValueError("duplicate ids in normal_id_pool")
        if any(v < 0 for v in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
            raise ValueError(f"attack_mix must be non-negative and sum to 1, got {mix}")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be an unsigned 64-bit integer")
        if self.malfunction_id is not None and self.malfunction_id not in {s.can_id for s in self.normal_id_pool}:
            raise ValueError(f"malfunction_id {self.malfunction_id:#x} is not in the pool")
        if not 0 <= self.jitter < 0.5:
            raise ValueError("jitter must be in [0, 0.5)")

    @property
    def target_id(self) -> IdSpec:
        if self.malfunction_id is None:
            return self.normal_id_pool[0]
        return next(s for s in self.normal_id_pool if s.can_id == self.malfunction_id)

    def to_dict(self) -> dict:
        return {
            "vehicle_name": self.vehicle_name,
            "normal_id_pool": [
                {"can_id": s.can_id, "period": s.period, "template": s.template.hex()} for s in self.normal_id_pool
            ],
            "attack_mix": {cls.name.lower(): self.attack_mix[cls] for cls in TrafficClass},
            "duration": self.duration,
            "rng_seed": self.rng_seed,
            "malfunction_id": self.malfunction_id,
            "jitter": self.jitter,
            "flood_burst": self.flood_burst,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthProfile":
        pool = tuple(IdSpec(int(s["can_id"]), float(s["period"]), bytes.fromhex(s["template"])) for s in d["normal_id_pool"])
        mix = {TrafficClass[k.upper()]: float(v) for k, v in d["attack_mix"].items()}
        return cls(
            vehicle_name=d["vehicle_name"],
            normal_id_pool=pool,
            attack_mix=mix,
            duration=float(d["duration"]),
            rng_seed=int(d["rng_seed"]),
            malfunction_id=d.get("malfunction_id"),
            jitter=float(d.get("jitter", 0.05)),
            flood_burst=int(d.get("flood_burst", 200)),
        )


def _apportion(total: int, mix: Mapping[TrafficClass, float]) -> dict[TrafficClass, int]:
    """Largest-remainder rounding of ``total * mix``."""
    raw = {cls: total * w for cls, w in mix.items()}
    counts = {cls: int(math.floor(v)) for cls, v in raw.items()}
    short = total - sum(counts.values())
    for cls in sorted(raw, key=lambda c: (counts[c] - raw[c], int(c)))[:short]:
        counts[cls] += 1
    return counts


def _random_payload(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 256, size=(n, 8), dtype=np.uint8)


def synthesize(profile: SynthProfile) -> list[CanFrame]:
    """Generate a labeled, time-sorted capture for ``profile``.

    Normal traffic is periodic per pool id with uniform +-jitter. Attack
    frames are added so that the class proportions follow ``attack_mix``:
    flooding bursts of id 0 at a tenth of the fastest period (or faster),
    fuzzy frames with uniform ids and payloads at uniform times, and
    malfunction frames on the profile's target id with payloads that differ
    from its template.
    """
    rng = np.random.default_rng(np.random.SeedSequence(profile.rng_seed))
    mix = profile.attack_mix
    pool = profile.normal_id_pool
    min_period = min(s.period for s in pool)

    # (timestamp, class, can_id, payload bytes)
    events: list[tuple[float, int, int, bytes]] = []

    if mix[TrafficClass.NORMAL] > 0:
        for spec in pool:
            phase = rng.uniform(profile.jitter * spec.period, spec.period)
            n = int(math.ceil((profile.duration - phase) / spec.period))
            ticks = phase + spec.period * (np.arange(max(n, 0)) + rng.uniform(-profile.jitter, profile.jitter, max(n, 0)))
            for t in ticks[ticks < profile.duration]:
                events.append((float(t), 0, spec.can_id, spec.template))
        n_normal = len(events)
        total = int(round(n_normal / mix[TrafficClass.NORMAL]))
        rest = 1.0 - mix[TrafficClass.NORMAL]
        attacks = [c for c in TrafficClass if c != TrafficClass.NORMAL]
        if rest > 0:
            counts = _apportion(max(total - n_normal, 0), {c: mix[c] / rest for c in attacks})
        else:
            counts = {c: 0 for c in attacks}
        counts[TrafficClass.NORMAL] = n_normal
    else:
        total = int(round(profile.duration * sum(1.0 / s.period for s in pool)))
        counts = _apportion(total, mix)

    for cls in TrafficClass:
        if mix[cls] > 0 and counts[cls] == 0:
            raise GenerationError(f"{profile.vehicle_name}: duration/mix yields no {cls.name} frames")

    n_flood = counts[TrafficClass.FLOODING]
    if n_flood:
        gap = min(min_period / 10.0, profile.duration / n_flood)
        burst = max(1, profile.flood_burst)
        n_bursts = math.ceil(n_flood / burst)
        sizes = [burst] * (n_bursts - 1) + [n_flood - burst * (n_bursts - 1)]
        zero = bytes(8)
        for size in sizes:
            start = rng.uniform(0.0, max(profile.duration - size * gap, 0.0))
            for k in range(size):
                events.append((float(start + k * gap), 1, 0, zero))

    n_fuzzy = counts[TrafficClass.FUZZY]
    if n_fuzzy:
        times = rng.uniform(0.0, profile.duration, n_fuzzy)
        ids = rng.integers(0, MAX_CAN_ID + 1, n_fuzzy)
        data = _random_payload(rng, n_fuzzy)
        for t, cid, row in zip(times, ids, data):
            events.append((float(t), 2, int(cid), row.tobytes()))

    n_malf = counts[TrafficClass.MALFUNCTION]
    if n_malf:
        target = profile.target_id
        width = len(target.template)
        if width == 0:
            raise GenerationError("malfunction target id has an empty template; payload cannot differ")
        times = rng.uniform(0.0, profile.duration, n_malf)
        for t in times:
            while True:
                row = rng.integers(0, 256, width, dtype=np.uint8).tobytes()
                if row != target.template:
                    break
            events.append((float(t), 3, target.can_id, row))

    # timestamps at microsecond resolution, like a bus capture
    order = sorted(range(len(events)), key=lambda i: (round(events[i][0], 6), events[i][1], i))
    frames = []
    for i in order:
        t, cls, cid, payload = events[i]
        frames.append(CanFrame(round(max(t, 0.0), 6), cid, len(payload), payload, TrafficClass(cls)))
    return frames


def make_profile(
    vehicle_name: str,
    seed: int,
    *,
    n_ids: int = 16,
    periods: Sequence[float] = (0.01, 0.02, 0.05, 0.1),
    duration: float | None = None,
    frames_per_class: int = 2000,
    shared_pool: Sequence[IdSpec] = (),
    attack_mix: Mapping[TrafficClass, float] | None = None,
) -> SynthProfile:
    """Build a vehicle profile with a seeded random id pool.

    ``shared_pool`` entries are included verbatim (vehicles from the same
    platform share part of their id space); the remaining ids are drawn from
    0x080..0x7FF. Unless given, ``duration`` is chosen so that normal traffic
    yields about ``frames_per_class`` frames (slightly more, so that
    undersampling to ``frames_per_class`` per class is possible).
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pool = list(shared_pool)
    taken = {s.can_id for s in pool}
    while len(pool) < n_ids:
        cid = int(rng.integers(0x080, MAX_CAN_ID + 1))
        if cid in taken:
            continue
        taken.add(cid)
        dlc = int(rng.choice([8, 8, 8, 6, 4]))
        template = rng.integers(0, 256, dlc, dtype=np.uint8).tobytes()
        pool.append(IdSpec(cid, float(rng.choice(periods)), template))
    mix = attack_mix or {cls: 0.25 for cls in TrafficClass}
    if duration is None:
        rate = sum(1.0 / s.period for s in pool)
        duration = frames_per_class * 1.02 / rate
    return SynthProfile(
        vehicle_name=vehicle_name,
        normal_id_pool=tuple(pool),
        attack_mix=mix,
        duration=float(duration),
        rng_seed=int(rng.integers(0, 2**63)),
        malfunction_id=pool[-1].can_id,
    )


DEFAULT_VEHICLES = ("vehicle_a", "vehicle_b", "vehicle_c")


def default_profiles(
    seed: int = 0,
    names: Sequence[str] = DEFAULT_VEHICLES,
    frames_per_class: int = 2000,
    n_ids: int = 16,
    n_shared: int = 6,
) -> list[SynthProfile]:
    """Stand-in vehicles sharing a common block of platform ids (same period and template)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCA11]))
    shared = []
    for cid in sorted(rng.choice(np.arange(0x080, 0x400), size=n_shared, replace=False)):
        template = rng.integers(0, 256, 8, dtype=np.uint8).tobytes()
        shared.append(IdSpec(int(cid), float(rng.choice([0.01, 0.02, 0.05])), template))
    return [
        make_profile(
            name, int(np.random.SeedSequence([seed, k + 1]).generate_state(2, np.uint64)[0]),
            n_ids=n_ids, shared_pool=shared, frames_per_class=frames_per_class,
        )
        for k, name in enumerate(names)
    ]
