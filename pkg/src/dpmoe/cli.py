"""Command-line entry point.

    dpmoe train --config run.json [--output-dir DIR]
    dpmoe eval --checkpoint DIR/checkpoint.json --data DIR/validation.json
    dpmoe accountant --epsilon 8 --delta 1e-5 --q 0.01 --steps 1000
    dpmoe accountant --sigma 1.0 --delta 1e-5 --q 0.01 --steps 1000
    dpmoe gen-data --task majority --size 5000 --seed 0 --out DIR

Exit codes: 0 success, 1 training diverged, 2 configuration error,
3 privacy target infeasible.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .accountant import report
from .data import SyntheticTask, generate_dataset
from .errors import ConfigError, ParameterError, PrivacyInfeasibleError
from .trainer import RunConfig, TrainingDiverged, evaluate_checkpoint, train

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3


def _print_json(obj, stream=None):
    print(json.dumps(obj, indent=2, sort_keys=True), file=stream or sys.stdout)


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    if config.output_dir is None:
        config.output_dir = str(Path(args.config).with_suffix("")) + "_run"
    log = None
    if args.verbose:
        def log(rec):
            keys = ("step", "loss", "epsilon", "val_accuracy")
            print(" ".join(f"{k}={rec[k]}" for k in keys if k in rec), file=sys.stderr)
    result = train(config, log=log)
    _print_json({"summary": result.summary, "paths": result.paths})
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        acc, loss = evaluate_checkpoint(args.checkpoint, args.data)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot evaluate: {exc}") from exc
    _print_json({"accuracy": acc, "loss": loss})
    return EXIT_OK


def cmd_accountant(args) -> int:
    if args.sigma is None and args.epsilon is None:
        raise ConfigError("give --epsilon to calibrate sigma or --sigma to evaluate epsilon")
    try:
        out = report(epsilon=args.epsilon, delta=args.delta, q=args.q, steps=args.steps, sigma=args.sigma)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from exc
    _print_json({"sigma": out["sigma"], "epsilon": out["epsilon"], "best_order": out["best_order"]})
    return EXIT_OK


def cmd_gen_data(args) -> int:
    task = SyntheticTask(task=args.task, vocab=args.vocab, length=args.length, size=args.size)
    train_set, val_set = generate_dataset(task, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set.save(out / "train.json")
    val_set.save(out / "validation.json")
    _print_json({"train": str(out / "train.json"), "validation": str(out / "validation.json"),
                 "train_size": len(train_set), "val_size": len(val_set)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpmoe", description="Differentially private switch-MoE training.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training job from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir", default=None)
    t.add_argument("--verbose", action="store_true", help="echo per-step metrics to stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("accountant", help="calibrate sigma or evaluate epsilon (RDP, Poisson sampling)")
    a.add_argument("--epsilon", type=float, default=None)
    a.add_argument("--delta", type=float, required=True)
    a.add_argument("--q", type=float, required=True, help="Poisson sampling rate")
    a.add_argument("--steps", type=int, required=True)
    a.add_argument("--sigma", type=float, default=None)
    a.set_defaults(func=cmd_accountant)

    g = sub.add_parser("gen-data", help="write a synthetic train/validation split")
    g.add_argument("--task", default="majority")
    g.add_argument("--vocab", type=int, default=16)
    g.add_argument("--length", type=int, default=8)
    g.add_argument("--size", type=int, default=5000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PrivacyInfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
