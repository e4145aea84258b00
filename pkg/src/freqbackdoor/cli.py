"""Command-line entry point: ``freqbackdoor <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .data import save_dataset, split_loso
from .defenses import DEFENSES
from .harness import ConfigError, ExperimentConfig
from .models import evaluate_asr_fn, evaluate_ca, load_model, save_model
from .strategy import save_strategies

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("freqbackdoor")


class _Parser(argparse.ArgumentParser):
    # usage mistakes count as configuration errors, not argparse's default exit 2
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--paper-faithful", action="store_true",
                   help="score strategies on the test subject instead of the validation subject")
    p.add_argument("--pair", type=int, nargs=2, metavar=("POISON", "TEST"),
                   help="subject pair for single-run commands (default: first configured pair)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="freqbackdoor", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("gen-data", help="generate the synthetic dataset"))
    _common(sub.add_parser("split", help="write the LOSO subject assignment for the configured pairs"))
    _common(sub.add_parser("optimize", help="search injection strategies"))
    _common(sub.add_parser("poison", help="build the poisoned training subset"))
    _common(sub.add_parser("train", help="train the configured victims on clean + poisoned data"))
    p = sub.add_parser("eval", help="clean accuracy and attack success of a trained model")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p = sub.add_parser("defend", help="run the configured defenses against a trained model")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    _common(sub.add_parser("run", help="full experiment, writes report.json and plot CSVs"))
    p = sub.add_parser("export-plots", help="write per-figure CSVs from a report")
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    cfg.validate()
    return cfg


def _pair(args, cfg: ExperimentConfig, dataset) -> tuple[int, int]:
    if args.pair:
        return tuple(args.pair)
    return harness.resolve_pairs(cfg.pairs, dataset.subject_ids(), cfg.seed)[0]


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(harness.dumps_report(obj), encoding="utf-8")
    return path


def _prepare(args, cfg):
    dataset = harness.load_or_generate(cfg)
    return harness.prepare_run(cfg, dataset, _pair(args, cfg, dataset), args.paper_faithful, args.jobs)


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    if "path" in cfg.dataset:
        raise ConfigError("gen-data needs a dataset manifest, not a path")
    manifest = harness.manifest_for(cfg)
    dataset = harness.load_or_generate(cfg)
    print(save_dataset(dataset, manifest, args.out))


def cmd_split(args) -> None:
    cfg = _config(args)
    dataset = harness.load_or_generate(cfg)
    pairs = [tuple(args.pair)] if args.pair else harness.resolve_pairs(cfg.pairs, dataset.subject_ids(), cfg.seed)
    rows = []
    for p, t in pairs:
        s = split_loso(dataset, p, t, cfg.validation_subject)
        rows.append({"poison_subject": p, "test_subject": t, "validation_subject": s.validation_subject,
                     "train_subjects": [int(x) for x in s.train.subject_ids()],
                     "sizes": {"train": len(s.train), "poison_source": len(s.poison_source),
                               "validation": len(s.validation), "test": len(s.test)}})
    print(_write_json(args.out / "splits.json", {"pairs": rows}))


def cmd_optimize(args) -> None:
    cfg = _config(args)
    if cfg.strategy_source == "file":
        raise ConfigError("optimize needs strategy_source 'optimize' or 'random'")
    cfg = replace(cfg, attack=replace(cfg.attack, kind="professor_x"))
    prep = _prepare(args, cfg)
    T = prep.splits.train.shape[1]
    path = save_strategies(args.out / "strategies.json", prep.strategies, T, prep.fs, prep.results,
                           {"pair": list(prep.pair), "seed": cfg.seed})
    if prep.results:
        _write_json(args.out / "search.json", {str(c): {"algorithm": r.algorithm, "wall_time": r.wall_time,
                                                        "trace": [t.to_dict() for t in r.trace]}
                                               for c, r in prep.results.items()})
    print(path)


def cmd_poison(args) -> None:
    cfg = _config(args)
    prep = _prepare(args, cfg)
    if prep.poison is None:
        raise ConfigError("attack kind 'none' produces no poison set")
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "poison.npz"
    np.savez(path, X=prep.poison.X, y=prep.poison.y, subjects=prep.poison.subjects, fs=prep.fs)
    print(path)


def cmd_train(args) -> None:
    cfg = _config(args)
    prep = _prepare(args, cfg)
    for v in cfg.victims:
        model = harness.train_victim(cfg, prep, v)
        print(save_model(args.out / f"{v.name}.sbkm", model))


def cmd_eval(args) -> None:
    cfg = _config(args)
    prep = _prepare(args, cfg)
    model = load_model(args.model)
    classes = list(range(prep.n_classes))
    asr = evaluate_asr_fn(model, prep.splits.test.X, prep.poison_fn, classes)
    result = {"pair": list(prep.pair), "ca": evaluate_ca(model, prep.splits.test), "asr": asr.overall,
              "per_class_asr": {str(c): a for c, a in asr.per_class.items()}}
    _write_json(args.out / "eval.json", result)
    print(json.dumps(result))


def cmd_defend(args) -> None:
    cfg = _config(args)
    if not cfg.defenses:
        cfg.defenses = [{"kind": k} for k in DEFENSES]
    prep = _prepare(args, cfg)
    model = load_model(args.model)
    reports = harness.run_defenses(cfg, model, prep.splits, prep.poison, prep.poison_fn, prep.seed, prep.n_classes)
    print(_write_json(args.out / "defenses.json", reports))


def cmd_run(args) -> None:
    cfg = _config(args)
    report = harness.run_experiment(cfg, jobs=args.jobs, paper_faithful=args.paper_faithful)
    print(harness.save_report(report, args.out))
    harness.export_plots(report, args.out / "plots")


def cmd_export_plots(args) -> None:
    try:
        report = json.loads(args.report.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {args.report}: {exc}") from exc
    for p in harness.export_plots(report, args.out):
        print(p)


COMMANDS = {
    "gen-data": cmd_gen_data, "split": cmd_split, "optimize": cmd_optimize, "poison": cmd_poison,
    "train": cmd_train, "eval": cmd_eval, "defend": cmd_defend, "run": cmd_run, "export-plots": cmd_export_plots,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
