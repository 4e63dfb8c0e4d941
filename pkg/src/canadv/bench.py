"""Transferability grid: scenario tagging, metrics, aggregation and report tables.

Scenarios compare the attacker's surrogate with the target model:

* WhiteBox - same architecture and same training vehicle;
* GrayBox  - exactly one of the two matches;
* BlackBox - neither matches.

Clean records (a model on its own vehicle's test split) carry ``Clean``.
"""

from __future__ import annotations

import itertools
import json
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .evasion import AdversarialDataset, AttackKind
from .featurize import N_CLASSES, Dataset
from .zoo import Defense, ModelArchitecture, ModelIdentity, TrainedModel

ADVERSARIAL_SCENARIOS = ("white_box", "gray_box", "black_box")
SCENARIO_ABBREV = {"white_box": "WB", "gray_box": "GB", "black_box": "BB", "clean": "Clean"}


class Scenario(str, Enum):
    CLEAN = "clean"
    WHITE_BOX = "white_box"
    GRAY_BOX = "gray_box"
    BLACK_BOX = "black_box"


class GridError(ValueError):
    pass


class ReportError(ValueError):
    pass


def classify_scenario(target: ModelIdentity, adv: AdversarialDataset | ModelIdentity) -> Scenario:
    surrogate = adv.surrogate if isinstance(adv, AdversarialDataset) else adv
    same_arch = surrogate.architecture == target.architecture
    same_vehicle = surrogate.vehicle == target.vehicle
    if same_arch and same_vehicle:
        return Scenario.WHITE_BOX
    if same_arch or same_vehicle:
        return Scenario.GRAY_BOX
    return Scenario.BLACK_BOX


# ---------------------------------------------------------------------- metrics


def confusion_matrix(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    return np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def accuracy(confusion: np.ndarray) -> float:
    return float(np.trace(confusion) / confusion.sum())


def per_class_f1(confusion: np.ndarray) -> np.ndarray:
    """F1 per class; a class with precision + recall == 0 scores 0."""
    c = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    actual = c.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(confusion: np.ndarray) -> float:
    return float(per_class_f1(confusion).mean())


# ---------------------------------------------------------------------- records


@dataclass(frozen=True)
class EvalRecord:
    target: ModelIdentity
    dataset: str
    data_vehicle: str
    scenario: Scenario
    accuracy: float
    macro_f1: float
    confusion: tuple[tuple[int, ...], ...]
    surrogate: ModelIdentity | None = None
    attack: AttackKind | None = None
    eps: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "target": self.target.to_dict(),
            "dataset": self.dataset,
            "data_vehicle": self.data_vehicle,
            "scenario": self.scenario.value,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "confusion": [list(r) for r in self.confusion],
            "surrogate": None if self.surrogate is None else self.surrogate.to_dict(),
            "attack": None if self.attack is None else self.attack.value,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalRecord":
        return cls(
            ModelIdentity.from_dict(d["target"]),
            d["dataset"],
            d["data_vehicle"],
            Scenario(d["scenario"]),
            float(d["accuracy"]),
            float(d["macro_f1"]),
            tuple(tuple(int(v) for v in r) for r in d["confusion"]),
            None if d["surrogate"] is None else ModelIdentity.from_dict(d["surrogate"]),
            None if d["attack"] is None else AttackKind(d["attack"]),
            None if d["eps"] is None else float(d["eps"]),
        )


def evaluate(target: TrainedModel, data: Dataset | AdversarialDataset) -> EvalRecord:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if data.features.shape[1] != target.network.input_width:
        raise ValueError("dataset width does not match the model")
    cm = confusion_matrix(data.labels, target.predict(data.features))
    common = dict(
        target=target.identity,
        data_vehicle=data.vehicle,
        accuracy=accuracy(cm),
        macro_f1=macro_f1(cm),
        confusion=tuple(tuple(int(v) for v in row) for row in cm),
    )
    if isinstance(data, AdversarialDataset):
        return EvalRecord(
            dataset=data.name, scenario=classify_scenario(target.identity, data), surrogate=data.surrogate,
            attack=data.config.kind, eps=data.config.eps, **common,
        )
    return EvalRecord(dataset=f"clean_{data.vehicle}_{data.split.value}", scenario=Scenario.CLEAN, **common)


@dataclass
class TransferMatrix:
    records: list[EvalRecord]
    attack_kinds: tuple[AttackKind, ...]
    eps_values: tuple[float, ...]
    targets: tuple[ModelIdentity, ...]
    surrogates: tuple[ModelIdentity, ...]

    def adversarial(self) -> list[EvalRecord]:
        return [r for r in self.records if r.scenario is not Scenario.CLEAN]

    def clean(self) -> list[EvalRecord]:
        return [r for r in self.records if r.scenario is Scenario.CLEAN]

    def scenario_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in ADVERSARIAL_SCENARIOS}
        for r in self.adversarial():
            counts[r.scenario.value] += 1
        return counts

    def expected_cells(self) -> set[tuple]:
        return {
            (t, s, k, e)
            for t, s, k, e in itertools.product(self.targets, self.surrogates, self.attack_kinds, self.eps_values)
        }

    def missing_cells(self) -> list[tuple]:
        have = {(r.target, r.surrogate, r.attack, r.eps) for r in self.adversarial()}
        missing = sorted(self.expected_cells() - have, key=lambda c: (str(c[0]), str(c[1]), c[2].value, c[3]))
        have_clean = {r.target for r in self.clean()}
        missing += [(t, None, None, None) for t in self.targets if t not in have_clean]
        return missing

    def to_dict(self) -> dict[str, Any]:
        return {
            "attack_kinds": [k.value for k in self.attack_kinds],
            "eps_values": list(self.eps_values),
            "targets": [t.to_dict() for t in self.targets],
            "surrogates": [s.to_dict() for s in self.surrogates],
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TransferMatrix":
        return cls(
            [EvalRecord.from_dict(r) for r in d["records"]],
            tuple(AttackKind(k) for k in d["attack_kinds"]),
            tuple(float(e) for e in d["eps_values"]),
            tuple(ModelIdentity.from_dict(t) for t in d["targets"]),
            tuple(ModelIdentity.from_dict(s) for s in d["surrogates"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def _describe(cell: tuple) -> str:
    t, s, k, e = cell
    if s is None:
        return f"clean evaluation of {t}"
    return f"{t} on {k.value} eps={e} crafted against {s}"


def run_grid(
    models: Sequence[TrainedModel],
    adv_sets: Sequence[AdversarialDataset],
    clean_tests: Mapping[str, Dataset],
    surrogates: Sequence[ModelIdentity] | None = None,
    jobs: int = 1,
) -> TransferMatrix:
    """Evaluate every model on every adversarial dataset and on its own clean test split.

    ``surrogates`` defaults to the identities of ``models``; pass the baseline
    identities when the targets are defended models.
    """
    sur = tuple(surrogates) if surrogates is not None else tuple(m.identity for m in models)
    kinds = tuple(sorted({a.config.kind for a in adv_sets}, key=list(AttackKind).index))
    eps_values = tuple(sorted({a.config.eps for a in adv_sets}))
    by_cell = {}
    for a in adv_sets:
        key = (a.surrogate, a.config.kind, a.config.eps)
        if key in by_cell:
            raise GridError(f"duplicate adversarial dataset {a.name}")
        by_cell[key] = a
    missing = [
        (s, k, e) for s, k, e in itertools.product(sur, kinds, eps_values) if (s, k, e) not in by_cell
    ]
    if missing:
        s, k, e = missing[0]
        raise GridError(f"missing adversarial dataset for surrogate {s}, {k.value}, eps={e} ({len(missing)} missing)")
    for m in models:
        if m.trained_on_vehicle not in clean_tests:
            raise GridError(f"no clean test split for vehicle {m.trained_on_vehicle}")

    jobs_list: list[tuple[TrainedModel, Dataset | AdversarialDataset]] = []
    for m in models:
        jobs_list.append((m, clean_tests[m.trained_on_vehicle]))
        for s, k, e in itertools.product(sur, kinds, eps_values):
            jobs_list.append((m, by_cell[(s, k, e)]))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(lambda job: evaluate(*job), jobs_list))
    else:
        records = [evaluate(m, d) for m, d in jobs_list]
    return TransferMatrix(records, kinds, eps_values, tuple(m.identity for m in models), sur)


def scenario_partition_oracle(
    targets: Iterable[ModelIdentity], surrogates: Iterable[ModelIdentity], n_attack_configs: int
) -> dict[str, int]:
    """Count WB/GB/BB cells directly from the identities (no records needed)."""
    counts = {s: 0 for s in ADVERSARIAL_SCENARIOS}
    for t, s in itertools.product(list(targets), list(surrogates)):
        counts[classify_scenario(t, s).value] += n_attack_configs
    return counts


# ----------------------------------------------------------------------- report


def _mean(values: Sequence[float]) -> float | None:
    return float(sum(values) / len(values)) if values else None


def _group_mean(records: Iterable[EvalRecord], key, metric: str = "macro_f1") -> dict:
    groups: dict[Any, list[float]] = defaultdict(list)
    for r in records:
        groups[key(r)].append(getattr(r, metric))
    return {k: (_mean(v), len(v)) for k, v in groups.items()}


def _scenario_table(records: list[EvalRecord], row_key, rows: Sequence[str]) -> dict[str, dict[str, Any]]:
    table = {}
    means = _group_mean(records, lambda r: (row_key(r), r.scenario.value))
    for row in rows:
        table[row] = {}
        for sc in ADVERSARIAL_SCENARIOS:
            value, n = means.get((row, sc), (None, 0))
            table[row][SCENARIO_ABBREV[sc]] = {"mean_f1": value, "n": n}
    return table


def report(matrix: TransferMatrix, defended: Mapping[str, TransferMatrix] | None = None) -> dict[str, Any]:
    """Aggregate a complete grid into the five result tables.

    * ``baseline``   - accuracy and macro-F1 per architecture x vehicle (clean test splits);
    * ``by_model``   - mean adversarial macro-F1 per target architecture x scenario;
    * ``by_attack``  - mean adversarial macro-F1 per attack x scenario;
    * ``by_model_eps`` / ``by_attack_eps`` - the same, broken down per eps;
    * ``defenses``   - per defense mode: clean and WB/GB/BB macro-F1 per architecture;
    * ``defenses_eps`` - the defended WB/GB/BB means per eps.

    Means run over every matching record (all eps values pooled).
    """
    missing = matrix.missing_cells()
    if missing:
        listing = "; ".join(_describe(c) for c in missing[:10])
        raise ReportError(f"{len(missing)} grid cells missing: {listing}")
    archs = [a.value for a in ModelArchitecture if any(t.architecture == a for t in matrix.targets)]
    vehicles = sorted({t.vehicle for t in matrix.targets})
    adv = matrix.adversarial()

    baseline: dict[str, dict[str, Any]] = {a: {} for a in archs}
    for r in matrix.clean():
        baseline[r.target.architecture.value][r.target.vehicle] = {"accuracy": r.accuracy, "macro_f1": r.macro_f1}

    doc: dict[str, Any] = {
        "grid": {
            "attack_kinds": [k.value for k in matrix.attack_kinds],
            "eps_values": list(matrix.eps_values),
            "architectures": archs,
            "vehicles": vehicles,
            "n_adversarial_records": len(adv),
            "n_clean_records": len(matrix.clean()),
            "scenario_counts": {SCENARIO_ABBREV[k]: v for k, v in matrix.scenario_counts().items()},
        },
        "baseline": baseline,
        "by_model": _scenario_table(adv, lambda r: r.target.architecture.value, archs),
        "by_attack": _scenario_table(adv, lambda r: r.attack.value, [k.value for k in matrix.attack_kinds]),
        "by_model_eps": {
            repr(e): _scenario_table([r for r in adv if r.eps == e], lambda r: r.target.architecture.value, archs)
            for e in matrix.eps_values
        },
        "by_attack_eps": {
            repr(e): _scenario_table(
                [r for r in adv if r.eps == e], lambda r: r.attack.value, [k.value for k in matrix.attack_kinds]
            )
            for e in matrix.eps_values
        },
        "defenses": {},
        "defenses_eps": {},
    }
    for mode, dm in (defended or {}).items():
        missing = dm.missing_cells()
        if missing:
            raise ReportError(f"defense {mode}: {len(missing)} grid cells missing, e.g. {_describe(missing[0])}")
        d_archs = [a.value for a in ModelArchitecture if any(t.architecture == a for t in dm.targets)]
        table = _scenario_table(dm.adversarial(), lambda r: r.target.architecture.value, d_archs)
        clean = _group_mean(dm.clean(), lambda r: r.target.architecture.value)
        for a in d_archs:
            value, n = clean[a]
            table[a] = {"Clean": {"mean_f1": value, "n": n}, **table[a]}
        doc["defenses"][mode] = table
        doc["defenses_eps"][mode] = {
            repr(e): _scenario_table(
                [r for r in dm.adversarial() if r.eps == e], lambda r: r.target.architecture.value, d_archs
            )
            for e in dm.eps_values
        }
    return doc


def _fmt(x: float | None) -> str:
    return "  -  " if x is None else f"{x:.3f}"


def render_text(doc: Mapping[str, Any]) -> str:
    lines = []
    grid = doc["grid"]
    vehicles = grid["vehicles"]
    lines.append("Baseline performance (clean test split)")
    lines.append("model  " + "".join(f"| {v:^15} " for v in vehicles))
    lines.append("       " + "| acc     f1      " * len(vehicles))
    for arch, row in doc["baseline"].items():
        cells = "".join(
            f"| {_fmt(row.get(v, {}).get('accuracy'))}   {_fmt(row.get(v, {}).get('macro_f1'))}   " for v in vehicles
        )
        lines.append(f"{arch.upper():<7}{cells}")

    def scenario_block(title: str, table: Mapping[str, Any], cols: Sequence[str]) -> None:
        lines.append("")
        lines.append(title)
        lines.append(f"{'':<8}" + "".join(f"{c:>8}" for c in cols))
        for row, cells in table.items():
            lines.append(f"{row.upper():<8}" + "".join(f"{_fmt(cells[c]['mean_f1']):>8}" for c in cols))

    scen = ["WB", "GB", "BB"]
    scenario_block("Mean macro-F1 on adversarial datasets, by target model", doc["by_model"], scen)
    scenario_block("Mean macro-F1 on adversarial datasets, by attack", doc["by_attack"], scen)
    for eps, table in doc["by_model_eps"].items():
        scenario_block(f"By target model at eps={eps}", table, scen)
    for eps, table in doc["by_attack_eps"].items():
        scenario_block(f"By attack at eps={eps}", table, scen)
    for mode, table in doc["defenses"].items():
        scenario_block(f"Defense: {mode}", table, ["Clean", *scen])
        for eps, t in doc.get("defenses_eps", {}).get(mode, {}).items():
            scenario_block(f"Defense: {mode} at eps={eps}", t, scen)
    lines.append("")
    counts = grid["scenario_counts"]
    lines.append(
        f"{grid['n_adversarial_records']} adversarial evaluations "
        f"(WB {counts['WB']}, GB {counts['GB']}, BB {counts['BB']}), {grid['n_clean_records']} clean"
    )
    return "\n".join(lines) + "\n"
