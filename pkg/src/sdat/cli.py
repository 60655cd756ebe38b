"""Command line entry point: ``sdat <subcommand> [options]``.

Exit codes: 0 success, 2 usage / config / input-file error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import io
from .config import ConfigError, ExperimentConfig, load_config
from .fairness import evaluate
from .numerics import ShapeError
from .pipeline import Pipeline, StageFailure, format_table, run_sweep, stage_rng
from .testbed import TrainingFailure
from .transport import check_prob_batch, match_histograms

log = logging.getLogger("sdat")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("SDAT_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"SDAT_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _config(args) -> ExperimentConfig:
    overrides = {"seed": args.seed, "out_dir": args.out}
    return load_config(args.config, **overrides)


def _pipeline(args) -> Pipeline:
    cfg = _config(args)
    try:
        return Pipeline(cfg, cfg.out_dir, resume=getattr(args, "resume", False))
    except OSError as exc:
        raise UsageError(f"cannot use output directory {cfg.out_dir!r}: {exc}") from exc


def _need(pipe: Pipeline, *names):
    missing = [str(pipe.path(n)) for n in names if not pipe.path(n).exists()]
    if missing:
        raise UsageError(f"missing input artifacts (run the earlier stage first): {missing}")


def cmd_gen_data(args):
    pipe = _pipeline(args)
    pipe._guard("gen-data", pipe.gen_data)
    info = pipe.info["gen-data"]
    print(json.dumps({"dataset": str(pipe.path("target_bin")), **info}, indent=2))


def cmd_train_classifier(args):
    pipe = _pipeline(args)
    _need(pipe, "target_bin")
    pipe._guard("train-classifier", pipe.train_classifier)
    print(json.dumps({"classifier": str(pipe.path("classifier")), **pipe.info["train-classifier"]}, indent=2))


def cmd_pretrain_generator(args):
    pipe = _pipeline(args)
    _need(pipe, "classifier")
    pipe._guard("pretrain-generator", pipe.pretrain_generator)
    print(json.dumps({"generator": str(pipe.path("generator_pretrained")), **pipe.info["pretrain-generator"]}, indent=2))


def cmd_finetune(args):
    pipe = _pipeline(args)
    _need(pipe, "target_bin", "classifier", "generator_pretrained")
    ds = io.load_dataset(pipe.path("target_bin"))
    clf = io.load_params(pipe.path("classifier"))
    gen0 = io.load_params(pipe.path("generator_pretrained"))
    pipe._guard("finetune", pipe.finetune, gen0, clf, ds)
    curves = pipe.info["finetune"]["curves"]
    print(json.dumps({
        "generator": str(pipe.path("generator_tuned")),
        "losses": str(pipe.path("losses")),
        "final_total_loss": curves["total"][-1] if curves["total"] else None,
    }, indent=2))


def cmd_evaluate(args):
    cfg = _config(args)
    gen = io.load_params(args.generator)
    clf = io.load_params(args.classifier)
    if gen.sizes[-1] != clf.sizes[0]:
        raise UsageError(f"generator emits {gen.sizes[-1]}-D points, classifier expects {clf.sizes[0]}-D")
    if clf.sizes[-1] != len(cfg.target_weights):
        raise UsageError(f"classifier has {clf.sizes[-1]} classes, target weights have {len(cfg.target_weights)}")
    report = evaluate(gen, clf, cfg.target_weights, cfg.eval_samples, stage_rng(cfg.seed, "evaluate"), cfg.counting)
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "bias_report.json").write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write report: {exc}") from exc
    sys.stdout.write(text)


def cmd_run(args):
    cfg = _config(args)
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise UsageError(f"--seeds expects comma-separated integers: {exc}") from exc
        try:
            Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(str(exc)) from exc
        reports = run_sweep(cfg, seeds, cfg.out_dir, resume=args.resume)
        summary = [
            {"seed": r["seed"], "bias_before": r["before"]["bias"], "bias_after": r["after"]["bias"],
             "abs_target_gap_after": r["after"]["abs_target_gap"]}
            for r in reports
        ]
        (Path(cfg.out_dir) / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
        for r in reports:
            print(f"seed {r['seed']}")
            print(format_table(r))
        return
    pipe = _pipeline(args)
    report = pipe.run()
    print(format_table(report))
    print(f"report: {pipe.out / 'report.json'}")


def cmd_assign(args):
    try:
        P = check_prob_batch(io.read_histograms_csv(args.P), "P", atol=1e-6)
        U = check_prob_batch(io.read_histograms_csv(args.U), "U", atol=1e-6)
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    if P.shape != U.shape:
        raise UsageError(f"P has shape {P.shape}, U has shape {U.shape}")
    a = match_histograms(P, U)
    text = json.dumps({"sigma": list(a.sigma), "cost": a.cost}) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdat", description="Subgroup distribution aligned tuning on a 2-D testbed.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--resume", action="store_true", help="reuse stage artifacts whose inputs are unchanged")

    for name, fn, helptext in (
        ("gen-data", cmd_gen_data, "sample the stratified target dataset"),
        ("train-classifier", cmd_train_classifier, "train the frozen subgroup classifier"),
        ("pretrain-generator", cmd_pretrain_generator, "fit the biased generator by MMD"),
        ("finetune", cmd_finetune, "run SDAT fine-tuning"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("run", help="full pipeline with before/after report")
    common(p)
    p.add_argument("--seeds", help="comma-separated seeds; runs independent pipelines")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="bias report for a saved generator")
    p.add_argument("--generator", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("assign", help="optimal L1 matching between two histogram CSVs")
    p.add_argument("P")
    p.add_argument("U")
    p.add_argument("-o", "--output", help="also write the JSON here")
    p.set_defaults(func=cmd_assign)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        _setup_logging()
        args.func(args)
    except (UsageError, ConfigError, io.FormatError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, (io.FormatError, OSError)):
            return EXIT_USAGE
        return EXIT_RUNTIME
    except TrainingFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as exc:
        # input validation (bad CSV, simplex violations, unreadable files)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
