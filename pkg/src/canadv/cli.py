"""Command-line pipeline: synth -> featurize -> train -> attack -> eval -> defend -> report.

Every stage reads its inputs from and writes its outputs to ``output_dir``::

    logs/<vehicle>.csv                      synthesized (or copied) CAN logs
    data/<vehicle>_{train,test}.cds         featurized, balanced, split datasets
    models/<arch>_<vehicle>.ckpt            baseline checkpoints
    eval/baseline.json                      clean test metrics of the baselines
    adv/<attack>_eps<e>_<arch>_<vehicle>.cds adversarial test sets
    eval/matrix.json                        transfer matrix of the baselines
    defended/<mode>_<arch>_<vehicle>.ckpt   defended checkpoints
    eval/defended_<mode>.json               transfer matrices of defended models
    report/report.json, report/report.txt   result tables

Exit codes: 0 ok, 2 config error, 3 missing upstream artifact, 4 data error,
5 training/attack failure, 6 I/O error, 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from . import bench, canlog, container, evasion, featurize, hardening, zoo
from .seeding import derive_seed

log = logging.getLogger("canadv")

STAGES = ("synth", "featurize", "train", "attack", "eval", "defend", "report")


class ConfigError(ValueError):
    pass


class DependencyError(RuntimeError):
    pass


# ----------------------------------------------------------------------- config


DEFAULTS: dict[str, Any] = {
    "master_seed": 0,
    "output_dir": "canadv-run",
    "vehicles": list(canlog.DEFAULT_VEHICLES),
    "synthetic": {"frames_per_class": 2000, "n_ids": 16, "n_shared": 6},
    "interval_cap": 1.0,
    "train_fraction": 0.8,
    "max_per_class": None,
    "architectures": ["dnn", "cnn", "lstm"],
    "train": {"epochs": 30, "lr": 0.001, "batch_size": 64},
    "attack_grid": {"kinds": ["fgsm", "bim", "pgd", "rfgsm"], "eps": [0.1, 0.2, 0.3], "steps": 10, "alpha_ratio": 0.25},
    "defense": {
        "modes": ["fine_tune", "adaptive_online"],
        "vehicles": None,
        "architectures": None,
        "attacks": ["fgsm", "bim", "pgd", "rfgsm"],
        "eps_max": 0.3,
        "unit": "epoch",
        "epochs": None,
        "finetune_epochs": 10,
        "eps_set": [0.1, 0.2, 0.3],
        "steps": 10,
        "clean_replay": False,
    },
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = dict(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


@dataclass
class VehicleSource:
    name: str
    profile: canlog.SynthProfile | None = None
    log: Path | None = None
    survival: dict[str, Path] | None = None


@dataclass
class RunConfig:
    raw: dict[str, Any]
    vehicles: list[VehicleSource]
    architectures: list[zoo.ModelArchitecture]
    train: zoo.TrainConfig
    attack_kinds: list[evasion.AttackKind]
    eps_values: list[float]
    output_dir: Path
    master_seed: int

    @property
    def config_hash(self) -> str:
        """Hash of everything that influences artifacts (output_dir excluded)."""
        canon = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def vehicle_names(self) -> list[str]:
        return [v.name for v in self.vehicles]

    def seed(self, *parts: object) -> int:
        return derive_seed(self.master_seed, *parts)

    @property
    def provenance(self) -> dict[str, Any]:
        return {"config_hash": self.config_hash, "master_seed": self.master_seed}

    def train_config(self, arch: str, vehicle: str, epochs: int | None = None) -> zoo.TrainConfig:
        t = self.raw["train"]
        return zoo.TrainConfig(
            epochs=int(epochs or t["epochs"]), lr=float(t["lr"]), batch_size=int(t["batch_size"]),
            seed=self.seed("train", arch, vehicle),
        )


def load_config(path: str | os.PathLike | None, seed: int | None = None, output: str | None = None) -> RunConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base_dir = Path(path).resolve().parent
    else:
        base_dir = Path.cwd()
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["master_seed"] = seed
    if output is not None:
        cfg["output_dir"] = output
    return resolve_config(cfg, base_dir)


def resolve_config(cfg: dict[str, Any], base_dir: Path | None = None) -> RunConfig:
    cfg = _merge(DEFAULTS, cfg)
    base_dir = base_dir or Path.cwd()
    master = cfg["master_seed"]
    if not isinstance(master, int) or not 0 <= master < 2**64:
        raise ConfigError("master_seed must be an unsigned 64-bit integer")

    synth = cfg["synthetic"]
    names = [v if isinstance(v, str) else v.get("name") for v in cfg["vehicles"]]
    if not names or any(not n for n in names) or len(set(names)) != len(names):
        raise ConfigError("vehicles need unique, non-empty names")
    plain = [n for n, v in zip(names, cfg["vehicles"]) if isinstance(v, str)]
    generated = {}
    if plain:
        profiles = canlog.default_profiles(
            derive_seed(master, "synth"), plain, int(synth["frames_per_class"]), int(synth["n_ids"]),
            int(synth["n_shared"]),
        )
        generated = {p.vehicle_name: p for p in profiles}
    sources = []
    for name, v in zip(names, cfg["vehicles"]):
        if isinstance(v, str):
            sources.append(VehicleSource(name, profile=generated[name]))
        elif "profile" in v:
            sources.append(VehicleSource(name, profile=canlog.SynthProfile.from_dict({**v["profile"], "vehicle_name": name})))
        elif "log" in v:
            sources.append(VehicleSource(name, log=(base_dir / v["log"]).resolve()))
        elif "survival" in v:
            sources.append(VehicleSource(name, survival={k: (base_dir / p).resolve() for k, p in v["survival"].items()}))
        else:
            raise ConfigError(f"vehicle {name}: expected one of 'profile', 'log', 'survival'")
    try:
        archs = [zoo.ModelArchitecture(a) for a in cfg["architectures"]]
        kinds = [evasion.AttackKind(k) for k in cfg["attack_grid"]["kinds"]]
        eps = [float(e) for e in cfg["attack_grid"]["eps"]]
        train = zoo.TrainConfig(int(cfg["train"]["epochs"]), float(cfg["train"]["lr"]), int(cfg["train"]["batch_size"]))
        [hardening.DefenseMode(m) for m in cfg["defense"]["modes"]]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(cfg["output_dir"])
    if not out.is_absolute():
        out = base_dir / out
    return RunConfig(cfg, sources, archs, train, kinds, eps, out, master)


# -------------------------------------------------------------------- artifacts


class Layout:
    def __init__(self, root: Path):
        self.root = root

    def log(self, vehicle: str) -> Path:
        return self.root / "logs" / f"{vehicle}.csv"

    def dataset(self, vehicle: str, split: str) -> Path:
        return self.root / "data" / f"{vehicle}_{split}.cds"

    def model(self, arch: str, vehicle: str) -> Path:
        return self.root / "models" / f"{arch}_{vehicle}.ckpt"

    def adv(self, kind: str, eps: float, arch: str, vehicle: str) -> Path:
        return self.root / "adv" / f"{kind}_eps{eps:.3f}_{arch}_{vehicle}.cds"

    def defended(self, mode: str, arch: str, vehicle: str) -> Path:
        return self.root / "defended" / f"{mode}_{arch}_{vehicle}.ckpt"

    @property
    def baseline(self) -> Path:
        return self.root / "eval" / "baseline.json"

    @property
    def matrix(self) -> Path:
        return self.root / "eval" / "matrix.json"

    def defended_matrix(self, mode: str) -> Path:
        return self.root / "eval" / f"defended_{mode}.json"

    @property
    def report_json(self) -> Path:
        return self.root / "report" / "report.json"

    @property
    def report_txt(self) -> Path:
        return self.root / "report" / "report.txt"


def _require(paths: Iterable[Path], stage: str) -> None:
    for p in paths:
        if not p.exists():
            raise DependencyError(f"{stage}: missing upstream artifact {p}")


def _write_text(path: Path, text: str) -> None:
    container.write_atomic(path, text.encode("utf-8"))


def _write_json(path: Path, doc: Any) -> None:
    _write_text(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _fan_out(jobs: int, fn: Callable, items: Sequence) -> list:
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


# ----------------------------------------------------------------------- stages


def cmd_synth(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    lay = Layout(cfg.output_dir)
    written = []
    for v in cfg.vehicles:
        if v.profile is None:
            continue
        try:
            frames = canlog.synthesize(v.profile)
        except canlog.GenerationError as exc:
            raise canlog.GenerationError(f"vehicle {v.name}: {exc}") from None
        path = lay.log(v.name)
        header = [f"vehicle={v.name}", f"config_hash={cfg.config_hash}", f"master_seed={cfg.master_seed}"]
        import io

        buf = io.StringIO()
        canlog.write_log(frames, buf, header)
        _write_text(path, buf.getvalue())
        written.append(path)
        log.info("synth: %s -> %s (%d frames)", v.name, path, len(frames))
    return written


def _frames_for(v: VehicleSource, lay: Layout) -> list[canlog.CanFrame]:
    if v.profile is not None:
        _require([lay.log(v.name)], "featurize")
        return canlog.read_log(lay.log(v.name))
    if v.log is not None:
        _require([v.log], "featurize")
        return canlog.read_log(v.log)
    frames = []
    for cls_name, path in sorted(v.survival.items()):
        _require([path], "featurize")
        attack = canlog.TrafficClass[cls_name.upper()]
        with open(path, encoding="utf-8", errors="replace") as fh:
            part = canlog.parse_survival(fh, attack)
        frames.extend(part)
    frames.sort(key=lambda f: f.timestamp)
    return frames


def _cap(d: featurize.Dataset, cap: int | None, seed: int) -> featurize.Dataset:
    if cap is None or len(d) <= 4 * cap:
        return d
    import numpy as np

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    rows = np.sort(rng.choice(len(d), size=4 * cap, replace=False))
    return d.take(rows)


def cmd_featurize(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    lay = Layout(cfg.output_dir)
    written = []
    for v in cfg.vehicles:
        frames = _frames_for(v, lay)
        full = featurize.extract_features(frames, float(cfg.raw["interval_cap"]), v.name)
        balanced = featurize.balance(full, cfg.seed("balance", v.name))
        balanced = _cap(balanced, cfg.raw["max_per_class"], cfg.seed("cap", v.name))
        if cfg.raw["max_per_class"] is not None:
            balanced = featurize.balance(balanced, cfg.seed("rebalance", v.name))
        train, test = featurize.split(balanced, float(cfg.raw["train_fraction"]), cfg.seed("split", v.name))
        for part in (train, test):
            part = replace(part, seed=cfg.master_seed, meta={**part.meta, **cfg.provenance})
            path = lay.dataset(v.name, part.split.value)
            featurize.save_dataset(part, path)
            written.append(path)
        log.info("featurize: %s -> %d train / %d test rows", v.name, len(train), len(test))
    return written


def _load_tests(cfg: RunConfig, lay: Layout, stage: str) -> dict[str, featurize.Dataset]:
    paths = {v: lay.dataset(v, "test") for v in cfg.vehicle_names}
    _require(paths.values(), stage)
    return {v: featurize.load_dataset(p) for v, p in paths.items()}


def _baseline_models(cfg: RunConfig, lay: Layout, stage: str) -> list[zoo.TrainedModel]:
    paths = [lay.model(a.value, v) for a in cfg.architectures for v in cfg.vehicle_names]
    _require(paths, stage)
    return [zoo.load(p) for p in paths]


def cmd_train(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    lay = Layout(cfg.output_dir)
    paths = {v: lay.dataset(v, "train") for v in cfg.vehicle_names}
    _require(paths.values(), "train")
    tests = _load_tests(cfg, lay, "train")
    cells = [(a, v) for a in cfg.architectures for v in cfg.vehicle_names]

    def run(cell):
        arch, vehicle = cell
        train_set = featurize.load_dataset(paths[vehicle])
        model = zoo.train(arch, train_set, cfg.train_config(arch.value, vehicle), vehicle)
        model = replace(model, provenance={**model.provenance, **cfg.provenance})
        zoo.save(model, lay.model(arch.value, vehicle))
        record = bench.evaluate(model, tests[vehicle])
        log.info("train: %s acc=%.4f f1=%.4f", model.identity, record.accuracy, record.macro_f1)
        return record

    records = _fan_out(jobs, run, cells)
    _write_json(lay.baseline, {"provenance": cfg.provenance, "records": [r.to_dict() for r in records]})
    return [lay.model(a.value, v) for a, v in cells]


def attack_seed(cfg: RunConfig, kind: str, eps: float, identity: zoo.ModelIdentity) -> int:
    return cfg.seed("attack", kind, repr(eps), identity.architecture.value, identity.vehicle)


def cmd_attack(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    lay = Layout(cfg.output_dir)
    tests = _load_tests(cfg, lay, "attack")
    models = _baseline_models(cfg, lay, "attack")
    grid = cfg.raw["attack_grid"]
    cells = [(m, k, e) for m in models for k in cfg.attack_kinds for e in cfg.eps_values]

    def run(cell):
        model, kind, eps = cell
        ac = evasion.AttackConfig(
            kind, eps, alpha=eps * float(grid["alpha_ratio"]), steps=int(grid["steps"]),
            rand_seed=attack_seed(cfg, kind.value, eps, model.identity),
        )
        adv = evasion.craft_dataset(model, tests[model.trained_on_vehicle], ac, provenance=cfg.provenance)
        path = lay.adv(kind.value, eps, model.architecture.value, model.trained_on_vehicle)
        evasion.save_adversarial(adv, path)
        log.info("attack: %s", path.name)
        return path

    return _fan_out(jobs, run, cells)


def _adv_sets(cfg: RunConfig, lay: Layout, stage: str) -> list[evasion.AdversarialDataset]:
    paths = [
        lay.adv(k.value, e, a.value, v)
        for a in cfg.architectures for v in cfg.vehicle_names for k in cfg.attack_kinds for e in cfg.eps_values
    ]
    _require(paths, stage)
    return [evasion.load_adversarial(p) for p in paths]


def cmd_eval(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    lay = Layout(cfg.output_dir)
    adv = _adv_sets(cfg, lay, "eval")
    models = _baseline_models(cfg, lay, "eval")
    tests = _load_tests(cfg, lay, "eval")
    matrix = bench.run_grid(models, adv, tests, jobs=jobs)
    _write_json(lay.matrix, {"provenance": cfg.provenance, "matrix": matrix.to_dict()})
    counts = matrix.scenario_counts()
    log.info("eval: %d adversarial records %s", len(matrix.adversarial()), counts)
    return [lay.matrix]


def defense_targets(cfg: RunConfig) -> list[tuple[zoo.ModelArchitecture, str]]:
    d = cfg.raw["defense"]
    vehicles = d["vehicles"] or cfg.vehicle_names
    archs = [zoo.ModelArchitecture(a) for a in (d["architectures"] or [a.value for a in cfg.architectures])]
    unknown = set(vehicles) - set(cfg.vehicle_names)
    if unknown:
        raise ConfigError(f"defense.vehicles lists unknown vehicles {sorted(unknown)}")
    return [(a, v) for a in archs for v in vehicles]


def cmd_defend(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    lay = Layout(cfg.output_dir)
    d = cfg.raw["defense"]
    adv = _adv_sets(cfg, lay, "defend")
    tests = _load_tests(cfg, lay, "defend")
    baseline_ids = [zoo.ModelIdentity(a, v) for a in cfg.architectures for v in cfg.vehicle_names]
    targets = defense_targets(cfg)
    written = []
    for mode_name in d["modes"]:
        mode = hardening.DefenseMode(mode_name)

        def run(cell):
            arch, vehicle = cell
            train_set = featurize.load_dataset(lay.dataset(vehicle, "train"))
            seed = cfg.seed("defend", mode.value, arch.value, vehicle)
            if mode is hardening.DefenseMode.FINE_TUNE:
                _require([lay.model(arch.value, vehicle)], "defend")
                dc = hardening.DefenseConfig(
                    mode, tuple(d["attacks"]), None, int(d["finetune_epochs"]), tuple(d["eps_set"]), seed,
                    int(d["steps"]), bool(d["clean_replay"]),
                )
                model = hardening.finetune(zoo.load(lay.model(arch.value, vehicle)), train_set, dc)
            else:
                tc = cfg.train_config(arch.value, vehicle, d["epochs"])
                if d["unit"] == "epoch":
                    units = tc.epochs
                else:
                    units = -(-len(train_set) // tc.batch_size)
                schedule = hardening.EpsSchedule(float(d["eps_max"]), units, hardening.ScheduleUnit(d["unit"]))
                dc = hardening.DefenseConfig(mode, tuple(d["attacks"]), schedule, seed=seed, steps=int(d["steps"]))
                model = hardening.adaptive_online_train(arch, train_set, tc, dc, vehicle)
            model = replace(model, provenance={**model.provenance, **cfg.provenance})
            path = lay.defended(mode.value, arch.value, vehicle)
            zoo.save(model, path)
            log.info("defend: %s -> %s", model.identity, path.name)
            return model

        models = _fan_out(jobs, run, targets)
        written += [lay.defended(mode.value, a.value, v) for a, v in targets]
        matrix = bench.run_grid(models, adv, tests, surrogates=baseline_ids, jobs=jobs)
        _write_json(lay.defended_matrix(mode.value), {"provenance": cfg.provenance, "matrix": matrix.to_dict()})
        written.append(lay.defended_matrix(mode.value))
    return written


def _load_matrix(path: Path) -> bench.TransferMatrix:
    return bench.TransferMatrix.from_dict(json.loads(path.read_text(encoding="utf-8"))["matrix"])


def cmd_report(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    lay = Layout(cfg.output_dir)
    _require([lay.matrix], "report")
    matrix = _load_matrix(lay.matrix)
    defended = {}
    for mode in cfg.raw["defense"]["modes"]:
        if lay.defended_matrix(mode).exists():
            defended[mode] = _load_matrix(lay.defended_matrix(mode))
    doc = bench.report(matrix, defended)
    doc["provenance"] = {
        **cfg.provenance,
        "train_config": {**cfg.raw["train"], "loss": "softmax_cross_entropy", "optimizer": "adam"},
        "attack_grid": cfg.raw["attack_grid"],
        "defense": cfg.raw["defense"],
        "engine": {
            "conv": "stride 1, no padding", "pool": "max, window 2, stride 2",
            "init": "uniform He (dense/conv), uniform 1/sqrt(hidden) (lstm), forget bias 1",
        },
    }
    _write_json(lay.report_json, doc)
    _write_text(lay.report_txt, bench.render_text(doc))
    return [lay.report_json, lay.report_txt]


COMMANDS: dict[str, Callable[[RunConfig, int], list[Path]]] = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "defend": cmd_defend,
    "report": cmd_report,
}


def run_all(cfg: RunConfig, jobs: int = 1, skip_defend: bool = False) -> None:
    for stage in STAGES:
        if skip_defend and stage == "defend":
            continue
        COMMANDS[stage](cfg, jobs)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, DependencyError):
        return 3
    if isinstance(exc, (canlog.LogParseError, canlog.GenerationError, featurize.BalanceError,
                        featurize.SplitError, featurize.OrderingError, container.ContainerError)):
        return 4
    if isinstance(exc, (zoo.TrainingError, evasion.AttackError)):
        return 5
    if isinstance(exc, OSError):
        return 6
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canadv", description=__doc__.split("\n")[0])
    parser.add_argument("--config", help="JSON run configuration (defaults reproduce the full grid)")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for train/attack/eval fan-out")
    parser.add_argument("--seed", type=int, help="override master_seed")
    parser.add_argument("--output", help="override output_dir")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", "") + " stage")
    p_all = sub.add_parser("all", help="run every stage in order")
    p_all.add_argument("--skip-defend", action="store_true")
    sub.add_parser("show-config", help="print the resolved configuration")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.output)
        if args.command == "show-config":
            print(json.dumps({**cfg.raw, "config_hash": cfg.config_hash}, indent=2, sort_keys=True))
        elif args.command == "all":
            run_all(cfg, args.jobs, args.skip_defend)
        else:
            COMMANDS[args.command](cfg, args.jobs)
    except Exception as exc:  # categorized below; tracebacks only with -v
        code = _exit_code(exc)
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            log.exception("traceback")
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
