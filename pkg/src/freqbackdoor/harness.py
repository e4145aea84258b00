"""Experiment configuration, LOSO orchestration, robustness battery, transfer runs and plot-data export."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import defenses as dfn
from .attacks import AttackConfig, adver_mt, poison_with, trigger_fn
from .data import (
    DatasetManifest,
    DatasetSplits,
    SegmentSet,
    TriggerBank,
    generate_synthetic,
    load_dataset,
    select_triggers,
    split_loso,
)
from .models import Classifier, ClassifierSpec, TrainConfig, evaluate_asr_fn, evaluate_ca, fit
from .signal import downsample_array, filter_array, resampled_length
from .strategy import (
    OptimizerConfig,
    best_strategies,
    load_strategies,
    optimize_strategies,
    poison_reference_count,
    random_strategy,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STRATEGY_SOURCES = ("optimize", "file", "random")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# configuration ----------------------------------------------------------------

@dataclass
class Preprocessing:
    name: str
    kind: str
    cutoff_hz: float | None = None
    cutoff_fraction: float | None = None
    keep_ratio: float | None = None

    def __post_init__(self):
        if self.kind in ("remove_above", "remove_below"):
            if (self.cutoff_hz is None) == (self.cutoff_fraction is None):
                raise ConfigError(f"preprocessing {self.name!r}: give exactly one of cutoff_hz, cutoff_fraction")
        elif self.kind == "downsample":
            if self.keep_ratio is None:
                raise ConfigError(f"preprocessing {self.name!r}: downsample needs keep_ratio")
        else:
            raise ConfigError(f"unknown preprocessing kind {self.kind!r}")

    def cutoff(self, fs: float) -> float:
        return self.cutoff_hz if self.cutoff_hz is not None else self.cutoff_fraction * fs / 2

    def apply(self, X: np.ndarray, fs: float) -> np.ndarray:
        if self.kind == "downsample":
            return downsample_array(X, self.keep_ratio)
        return filter_array(X, fs, self.kind, self.cutoff(fs))

    def output_length(self, T: int) -> int:
        return resampled_length(T, self.keep_ratio) if self.kind == "downsample" else T


@dataclass
class VictimSpec:
    name: str
    architecture: str = "cnn1d"
    options: dict = field(default_factory=dict)

    def spec(self, E: int, T: int, n_classes: int, seed: int) -> ClassifierSpec:
        return ClassifierSpec(self.architecture, (E, T), n_classes, seed=seed, **self.options)


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"manifest": {}})
    seed: int = 0
    pairs: Any = field(default_factory=lambda: {"sample": 6})
    validation_subject: int | None = None
    trigger_policy: str = "first"
    attack: AttackConfig = field(default_factory=AttackConfig)
    strategy_source: str = "optimize"
    strategy_file: str | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    victims: list[VictimSpec] = field(default_factory=lambda: [VictimSpec("cnn1d")])
    train: TrainConfig = field(default_factory=TrainConfig)
    rho: float = 0.4
    poison_reference: str = "poison_source"
    no_attack_baseline: bool = True
    preprocessing: list[Preprocessing] = field(default_factory=list)
    defenses: list[dict] = field(default_factory=list)
    residual_panel: bool = True
    output_dir: str | None = None
    schema_version: int = SCHEMA_VERSION

    def validate(self, base_dir: Path | None = None) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {self.schema_version}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be an explicit non-negative integer")
        if self.strategy_source not in STRATEGY_SOURCES:
            raise ConfigError(f"strategy_source must be one of {STRATEGY_SOURCES}")
        if self.strategy_source == "file":
            if not self.strategy_file:
                raise ConfigError("strategy_source 'file' needs strategy_file")
            if not _resolve(self.strategy_file, base_dir).exists():
                raise ConfigError(f"strategy file {self.strategy_file} does not exist")
        if "path" in self.dataset and not _resolve(self.dataset["path"], base_dir).exists():
            raise ConfigError(f"dataset directory {self.dataset['path']} does not exist")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError("rho must lie in (0, 1)")
        if self.trigger_policy not in ("first", "random"):
            raise ConfigError("trigger_policy must be 'first' or 'random'")
        if not self.victims:
            raise ConfigError("at least one victim model is required")
        names = [v.name for v in self.victims]
        if len(set(names)) != len(names):
            raise ConfigError(f"victim names must be unique: {names}")
        for d in self.defenses:
            if d.get("kind") not in dfn.DEFENSES:
                raise ConfigError(f"unknown defense {d.get('kind')!r}")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "dataset": self.dataset,
            "seed": self.seed,
            "pairs": self.pairs,
            "validation_subject": self.validation_subject,
            "trigger_policy": self.trigger_policy,
            "attack": {k: v for k, v in self.attack.__dict__.items()},
            "strategy_source": self.strategy_source,
            "strategy_file": self.strategy_file,
            "optimizer": self.optimizer.to_dict(),
            "victims": [{"name": v.name, "architecture": v.architecture, **({"options": v.options} if v.options else {})}
                        for v in self.victims],
            "train": self.train.to_dict(),
            "rho": self.rho,
            "poison_reference": self.poison_reference,
            "no_attack_baseline": self.no_attack_baseline,
            "preprocessing": [{k: v for k, v in p.__dict__.items() if v is not None} for p in self.preprocessing],
            "defenses": self.defenses,
            "residual_panel": self.residual_panel,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: Path | None = None) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "attack" in d:
                d["attack"] = AttackConfig(**d["attack"])
            if "optimizer" in d:
                d["optimizer"] = OptimizerConfig.from_dict(d["optimizer"])
            if "train" in d:
                d["train"] = TrainConfig(**d["train"])
            if "victims" in d:
                d["victims"] = [VictimSpec(**v) for v in d["victims"]]
            if "preprocessing" in d:
                d["preprocessing"] = [Preprocessing(**p) for p in d["preprocessing"]]
            cfg = cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate(base_dir)
        return cfg


def _resolve(path, base_dir: Path | None) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base_dir is None else base_dir / p


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    cfg = ExperimentConfig.from_dict(raw, path.parent)
    for key in ("strategy_file",):
        v = getattr(cfg, key)
        if v:
            setattr(cfg, key, str(_resolve(v, path.parent)))
    if "path" in cfg.dataset:
        cfg.dataset = {**cfg.dataset, "path": str(_resolve(cfg.dataset["path"], path.parent))}
    return cfg


# datasets and pairs -----------------------------------------------------------

def load_or_generate(config: ExperimentConfig) -> SegmentSet:
    if "path" in config.dataset:
        return load_dataset(config.dataset["path"])[0]
    return generate_synthetic(manifest_for(config))


def manifest_for(config: ExperimentConfig) -> DatasetManifest:
    m = dict(config.dataset.get("manifest", {}))
    m.setdefault("seed", config.seed)
    try:
        return DatasetManifest.from_dict(m)
    except TypeError as exc:
        raise ConfigError(f"invalid dataset manifest: {exc}") from exc


def resolve_pairs(spec, subjects, seed: int) -> list[tuple[int, int]]:
    subjects = [int(s) for s in subjects]
    full = [(p, t) for p in subjects for t in subjects if p != t]
    if spec == "full":
        return full
    if isinstance(spec, Mapping) and "sample" in spec:
        n = int(spec["sample"])
        if not 1 <= n <= len(full):
            raise ConfigError(f"cannot sample {n} of {len(full)} subject pairs")
        rng = np.random.default_rng([seed, 1013])
        idx = np.sort(rng.choice(len(full), size=n, replace=False))
        return [full[i] for i in idx]
    pairs = [(int(p), int(t)) for p, t in spec]
    for p, t in pairs:
        if p == t or p not in subjects or t not in subjects:
            raise ConfigError(f"invalid subject pair ({p}, {t})")
    return pairs


def run_seed(master: int, *key) -> int:
    return int(np.random.SeedSequence([master, *key]).generate_state(1)[0])


# single run -------------------------------------------------------------------

def mean_std(values) -> dict:
    v = np.asarray([x for x in values if x is not None and not (isinstance(x, float) and math.isnan(x))], dtype=np.float64)
    if not len(v):
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(len(v))}


def obtain_strategies(config: ExperimentConfig, splits: DatasetSplits, bank: TriggerBank, seed: int,
                      paper_faithful: bool = False, jobs: int = 1):
    E, T = splits.train.shape
    C = len(bank)
    if config.strategy_source == "file":
        strategies = load_strategies(config.strategy_file)
        for c in range(C):
            if c not in strategies:
                raise ConfigError(f"strategy file lacks class {c}")
            strategies[c].check_bounds(E, T // 2 + 1)
        return strategies, None
    opt = optimizer_config_for(config, seed, paper_faithful)
    if config.strategy_source == "random":
        rng = np.random.default_rng([seed, 29])
        return {c: random_strategy(E, T // 2 + 1, opt.gamma, opt.beta, rng, c, opt.alpha) for c in range(C)}, None
    results = optimize_strategies(splits, bank, opt, jobs=jobs)
    return best_strategies(results), results


def optimizer_config_for(config: ExperimentConfig, seed: int, paper_faithful: bool = False) -> OptimizerConfig:
    changes = {"seed": seed, "rho": config.rho, "poison_reference": config.poison_reference}
    if paper_faithful:
        changes["evaluate_on"] = "test"
    return replace(config.optimizer, **changes)


def _train_victim(victim: VictimSpec, X, y, T: int, E: int, C: int, train_cfg: TrainConfig, seed: int) -> Classifier:
    model = Classifier(victim.spec(E, T, C, seed))
    fit(model, X, y, replace(train_cfg, shuffle_seed=seed))
    return model


def _residual_panel(bank: TriggerBank, strategies, test: SegmentSet, poison_fn) -> dict:
    x = test.X[0]
    electrode = strategies[0].electrodes[0] if strategies else 0
    cols = {}
    for c in range(len(bank)):
        p = poison_fn(x[None], c)[0]
        cols[f"clean_c{c}"] = x[electrode].tolist()
        cols[f"poisoned_c{c}"] = p[electrode].tolist()
        cols[f"residual_c{c}"] = (p[electrode] - x[electrode]).tolist()
    return {"electrode": int(electrode), "columns": cols}


@dataclass
class PreparedRun:
    """Everything a run needs before victims are trained."""
    pair: tuple[int, int]
    seed: int
    splits: DatasetSplits
    bank: TriggerBank
    n_classes: int
    strategies: dict | None
    results: dict | None
    spatial_filters: np.ndarray | None
    poison_fn: Any
    poison: SegmentSet | None
    fs: float
    timings: dict

    @property
    def train_set(self) -> SegmentSet:
        if self.poison is not None and len(self.poison):
            return SegmentSet.concat([self.splits.train, self.poison])
        return self.splits.train


def prepare_run(config: ExperimentConfig, dataset: SegmentSet, pair: tuple[int, int],
                paper_faithful: bool = False, jobs: int = 1) -> PreparedRun:
    p_subj, t_subj = pair
    seed = run_seed(config.seed, p_subj, t_subj)
    timings = {}
    splits = split_loso(dataset, p_subj, t_subj, config.validation_subject)
    C = int(dataset.y.max()) + 1
    E, T = splits.train.shape
    bank = select_triggers(splits.poison_source, config.trigger_policy, seed, C)
    strategies, results, spatial = None, None, None
    ts = time.perf_counter()
    if config.attack.kind == "professor_x":
        strategies, results = obtain_strategies(config, splits, bank, seed, paper_faithful, jobs)
        timings["strategy_search"] = time.perf_counter() - ts
    elif config.attack.kind == "adver_mt":
        local = config.victims[0].spec(E, T, C, seed)
        spatial = adver_mt(splits.poison_source, C, local, config.train, config.attack.alpha_mse,
                           config.attack.adver_steps, config.attack.adver_lr)
        timings["spatial_filters"] = time.perf_counter() - ts
    prep = PreparedRun(tuple(pair), seed, splits, bank, C, strategies, results, spatial, None, None,
                       dataset.fs, timings)
    return with_strategies(config, prep, strategies)


def with_strategies(config: ExperimentConfig, prep: PreparedRun, strategies) -> PreparedRun:
    """Rebuild trigger function and poison set of ``prep`` around the given strategies."""
    poison_fn = trigger_fn(config.attack, prep.n_classes, prep.bank, strategies, prep.spatial_filters)
    poison = None
    if config.attack.kind != "none":
        n_ref = poison_reference_count(prep.splits, optimizer_config_for(config, prep.seed))
        poison = poison_with(prep.splits.poison_source, poison_fn, prep.n_classes, config.rho, n_ref, prep.seed)
    return replace(prep, strategies=strategies, poison_fn=poison_fn, poison=poison)


def victim_seed(run_seed_value: int, victim: VictimSpec) -> int:
    return run_seed(run_seed_value, hash_name(victim.name))


def train_victim(config: ExperimentConfig, prep: PreparedRun, victim: VictimSpec, poisoned: bool = True) -> Classifier:
    data = prep.train_set if poisoned else prep.splits.train
    E, T = data.shape
    return _train_victim(victim, data.X, data.y, T, E, prep.n_classes, config.train, victim_seed(prep.seed, victim))


def run_single(config: ExperimentConfig, dataset: SegmentSet, pair: tuple[int, int],
               paper_faithful: bool = False, jobs: int = 1) -> dict:
    t0 = time.perf_counter()
    prep = prepare_run(config, dataset, pair, paper_faithful, jobs)
    splits, seed, C, poison, poison_fn = prep.splits, prep.seed, prep.n_classes, prep.poison, prep.poison_fn
    strategies, results, bank = prep.strategies, prep.results, prep.bank
    E, T = splits.train.shape
    timings = dict(prep.timings)
    out: dict = {"pair": list(pair), "validation_subject": splits.validation_subject, "status": "ok"}
    if strategies is not None:
        out["strategies"] = {str(c): s.to_dict() for c, s in strategies.items()}
    if results:
        out["reward"] = {str(c): None if r.breakdown is None else r.breakdown.to_dict()
                         for c, r in results.items()}
        out["reward_trace"] = {str(c): [None if t.breakdown is None else t.breakdown.total for t in r.trace]
                               for c, r in results.items()}
    out["n_poison"] = 0 if poison is None else len(poison)
    train_set = prep.train_set

    classes = list(range(C))
    victims = {}
    models = {}
    for v in config.victims:
        ts = time.perf_counter()
        vseed = victim_seed(seed, v)
        cell = {}
        if config.no_attack_baseline:
            clean_model = _train_victim(v, splits.train.X, splits.train.y, T, E, C, config.train, vseed)
            cell["no_attack_ca"] = evaluate_ca(clean_model, splits.test)
            cell["no_attack_asr"] = evaluate_asr_fn(clean_model, splits.test.X, poison_fn, classes).overall
        model = _train_victim(v, train_set.X, train_set.y, T, E, C, config.train, vseed)
        asr = evaluate_asr_fn(model, splits.test.X, poison_fn, classes)
        cell.update({"ca": evaluate_ca(model, splits.test), "asr": asr.overall,
                     "per_class_asr": {str(c): a for c, a in asr.per_class.items()}})
        victims[v.name] = cell
        models[v.name] = model
        timings[f"victim_{v.name}"] = time.perf_counter() - ts
    out["victims"] = victims

    if config.preprocessing:
        out["robustness"] = {pp.name: {v.name: preprocessed_cell(config, prep, pp, v) for v in config.victims}
                             for pp in config.preprocessing}

    if config.defenses:
        target = models[config.victims[0].name]
        out["defenses"] = run_defenses(config, target, splits, poison, poison_fn, seed, C)

    if config.residual_panel and config.attack.kind != "none":
        out["residual"] = _residual_panel(bank, strategies, splits.test, poison_fn)
    timings["total"] = time.perf_counter() - t0
    out["timings"] = timings
    return out


def preprocessed_cell(config: ExperimentConfig, prep: PreparedRun, pp: Preprocessing, victim: VictimSpec) -> dict:
    """Retrain ``victim`` on the preprocessed (clean + poisoned) training set; CA and ASR after preprocessing."""
    data, test = prep.train_set, prep.splits.test
    E, T = data.shape
    pfn = lambda X, c: pp.apply(prep.poison_fn(X, c), prep.fs)
    m = _train_victim(victim, pp.apply(data.X, prep.fs), data.y, pp.output_length(T), E, prep.n_classes,
                      config.train, victim_seed(prep.seed, victim))
    return {"ca": float(np.mean(m.predict(pp.apply(test.X, prep.fs)) == test.y)),
            "asr": evaluate_asr_fn(m, test.X, pfn, list(range(prep.n_classes))).overall}


def hash_name(name: str) -> int:
    # stable across processes, unlike hash()
    return int.from_bytes(name.encode("utf-8")[:8].ljust(8, b"\0"), "little") % (2**31)


def run_defenses(config: ExperimentConfig, model: Classifier, splits: DatasetSplits, poison: SegmentSet | None,
                 poison_fn, seed: int, C: int) -> dict:
    reports = {}
    rng = np.random.default_rng([seed, 41])
    test = splits.test
    targets = rng.integers(C, size=len(test))
    triggered = np.array(test.X, copy=True)
    for c in range(C):
        sel = targets == c
        if sel.any():
            triggered[sel] = poison_fn(test.X[sel], c)
    for d in config.defenses:
        kind = d["kind"]
        opts = {k: v for k, v in d.items() if k != "kind"}
        try:
            if kind == "neural_cleanse":
                rep = dfn.neural_cleanse(model, splits.validation.X, dfn.NeuralCleanseConfig(**{"seed": seed, **opts}))
            elif kind == "strip":
                rep = dfn.strip_sweep(model, test.X, triggered, splits.validation.X, seed=seed, **opts)
            elif kind == "spectral_signature":
                if poison is None or not len(poison):
                    raise ValueError("spectral signature needs a poisoned training set")
                ratio = int(opts.pop("clean_per_poison", 10))
                n_clean = min(len(splits.train), ratio * len(poison))
                pick = np.sort(rng.choice(len(splits.train), size=n_clean, replace=False))
                X = np.concatenate([splits.train.X[pick], poison.X])
                flags = np.r_[np.zeros(n_clean, bool), np.ones(len(poison), bool)]
                rep = dfn.spectral_signature(model, X, flags, **opts)
            else:
                rep = dfn.fine_prune(model, splits.validation.X, splits.validation.y, test.X, test.y, poison_fn,
                                     list(range(C)), **opts)
            reports[kind] = rep.to_dict()
        except (ValueError, FloatingPointError) as exc:
            reports[kind] = {"kind": kind, "failed": str(exc)}
    return reports


# full experiment --------------------------------------------------------------

def _run_job(config: ExperimentConfig, pair, paper_faithful: bool) -> dict:
    dataset = load_or_generate(config)
    return _guarded(config, dataset, pair, paper_faithful)


def _guarded(config, dataset, pair, paper_faithful) -> dict:
    try:
        return run_single(config, dataset, pair, paper_faithful)
    except ConfigError:
        raise
    except Exception as exc:  # noqa: BLE001 - a failed cell is reported, not fatal
        log.error("run %s failed: %s", pair, exc)
        return {"pair": list(pair), "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc(limit=5)}


def aggregate(runs: list[dict], victims: list[str], preps: list[str]) -> dict:
    ok = [r for r in runs if r.get("status") == "ok"]
    agg: dict = {"runs": len(runs), "failed": len(runs) - len(ok), "victims": {}}
    for v in victims:
        cells = [r["victims"][v] for r in ok if v in r.get("victims", {})]
        entry = {k: mean_std([c.get(k) for c in cells]) for k in ("ca", "asr", "no_attack_ca", "no_attack_asr")}
        classes = sorted({k for c in cells for k in c.get("per_class_asr", {})}, key=int)
        entry["per_class_asr"] = {k: mean_std([c["per_class_asr"].get(k) for c in cells]) for k in classes}
        agg["victims"][v] = entry
    if preps:
        agg["robustness"] = {p: {v: {k: mean_std([r["robustness"][p][v][k] for r in ok if "robustness" in r])
                                     for k in ("ca", "asr")} for v in victims} for p in preps}
    return agg


def run_experiment(config: ExperimentConfig, jobs: int = 1, paper_faithful: bool = False) -> dict:
    dataset = load_or_generate(config)
    pairs = resolve_pairs(config.pairs, dataset.subject_ids(), config.seed)
    t0 = time.perf_counter()
    if jobs > 1 and len(pairs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_job, [config] * len(pairs), pairs, [paper_faithful] * len(pairs)))
    else:
        runs = [_guarded(config, dataset, p, paper_faithful) for p in pairs]
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "paper_faithful": paper_faithful,
        "pairs": [list(p) for p in pairs],
        "runs": runs,
        "aggregate": aggregate(runs, [v.name for v in config.victims], [p.name for p in config.preprocessing]),
        "timings": {"total": time.perf_counter() - t0},
    }
    return report


def strip_timings(obj):
    if isinstance(obj, dict):
        return {k: strip_timings(v) for k, v in obj.items() if k != "timings"}
    if isinstance(obj, list):
        return [strip_timings(v) for v in obj]
    return obj


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, default=_json_default, allow_nan=True) + "\n"


def save_report(report: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(dumps_report(report), encoding="utf-8")
    return path


# transfer matrix ----------------------------------------------------------------

def transfer_matrix(config: ExperimentConfig, specs: list[VictimSpec], pair: tuple[int, int] | None = None,
                    paper_faithful: bool = False) -> dict:
    """Strategies learned against each surrogate f, victims trained for each f_hat; CA/ASR per cell."""
    dataset = load_or_generate(config)
    pair = pair or resolve_pairs(config.pairs, dataset.subject_ids(), config.seed)[0]
    splits = split_loso(dataset, pair[0], pair[1], config.validation_subject)
    seed = run_seed(config.seed, *pair)
    C = int(dataset.y.max()) + 1
    E, T = splits.train.shape
    bank = select_triggers(splits.poison_source, config.trigger_policy, seed, C)
    cells = {}
    for f in specs:
        opt = optimizer_config_for(config, seed, paper_faithful)
        opt = replace(opt, surrogate={"architecture": f.architecture, **f.options})
        strategies = best_strategies(optimize_strategies(splits, bank, opt))
        pfn = trigger_fn(AttackConfig("professor_x"), C, bank, strategies)
        poison = poison_with(splits.poison_source, pfn, C, config.rho, poison_reference_count(splits, opt), seed)
        data = SegmentSet.concat([splits.train, poison])
        for g in specs:
            m = _train_victim(g, data.X, data.y, T, E, C, config.train, run_seed(seed, hash_name(g.name)))
            cells[(f.name, g.name)] = {"ca": evaluate_ca(m, splits.test),
                                       "asr": evaluate_asr_fn(m, splits.test.X, pfn, list(range(C))).overall}
    names = [s.name for s in specs]
    matrix = []
    for f in names:
        diag = cells[(f, f)]
        matrix.append([{**cells[(f, g)], "delta_ca": cells[(f, g)]["ca"] - diag["ca"],
                        "delta_asr": cells[(f, g)]["asr"] - diag["asr"]} for g in names])
    return {"pair": list(pair), "models": names, "matrix": matrix}


# plot-data export ---------------------------------------------------------------

def _write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def export_plots(report: dict, out_dir) -> list[Path]:
    """Per-figure CSVs: residual traces, defense histograms, pruning curves and reward traces."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for run in report.get("runs", []):
        if run.get("status") != "ok":
            continue
        tag = "run_p{}_t{}".format(*run["pair"])
        panel = run.get("residual")
        if panel:
            cols = panel["columns"]
            header = list(cols)
            written.append(_write_csv(out / f"{tag}_residual.csv", header, zip(*(cols[h] for h in header))))
        trace = run.get("reward_trace")
        if trace:
            classes = sorted(trace, key=int)
            K = max(len(trace[c]) for c in classes)
            rows = [[i] + [trace[c][i] if i < len(trace[c]) and trace[c][i] is not None else "" for c in classes]
                    for i in range(K)]
            written.append(_write_csv(out / f"{tag}_reward_trace.csv", ["iteration"] + [f"reward_c{c}" for c in classes], rows))
        for kind, rep in run.get("defenses", {}).items():
            for name, hist in rep.get("histograms", {}).items():
                edges, counts = hist["edges"], hist["counts"]
                written.append(_write_csv(out / f"{tag}_{kind}_{name}_hist.csv", ["bin_lo", "bin_hi", "count"],
                                          zip(edges[:-1], edges[1:], counts)))
            for name, curve in rep.get("curves", {}).items():
                keys = list(curve)
                written.append(_write_csv(out / f"{tag}_{kind}_{name}.csv", keys, zip(*(curve[k] for k in keys))))
    agg = report.get("aggregate", {})
    rows = []
    for v, entry in agg.get("victims", {}).items():
        for metric in ("ca", "asr", "no_attack_ca", "no_attack_asr"):
            m = entry.get(metric, {})
            rows.append([v, metric, m.get("mean"), m.get("std"), m.get("n")])
    if rows:
        written.append(_write_csv(out / "summary.csv", ["victim", "metric", "mean", "std", "n"],
                                  [[("" if x is None else x) for x in r] for r in rows]))
    return written
