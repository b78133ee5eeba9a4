"""Command line entry point: ``eratlab {gen,corrupt,train,sweep,report}``.

Exit codes: 0 success, 1 config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..datagen import load_dataset, save_dataset
from ..trainer import TrainingDivergedError
from . import runner
from .config import ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eratlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write the clean train/test dataset files")
    _add_config_args(p)

    p = sub.add_parser("corrupt", help="apply label noise and poisoning, write dataset + audit")
    _add_config_args(p)
    p.add_argument("--input", help="clean training dataset file (default: generate from the config)")

    p = sub.add_parser("train", help="run one experiment: metrics.csv, summary.json, model.ckpt")
    _add_config_args(p)

    p = sub.add_parser("sweep", help="run a grid of experiments")
    _add_config_args(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2", help="one swept key (repeatable)")
    p.add_argument("--workers", type=int, default=1, help="parallel runs (default 1)")

    p = sub.add_parser("report", help="tabulate summary.json files under a directory")
    p.add_argument("results", help="results directory")
    return parser


def parse_grid(items) -> dict[str, list[str]]:
    grid = {}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise ConfigError(f"grid entry must be KEY=V1,V2,..., got {item!r}", None, "--grid")
        grid[key.strip()] = [v.strip() for v in values.split(",")]
    if not grid:
        raise ConfigError("sweep needs at least one --grid entry", None, "--grid")
    return grid


def cmd_gen(args) -> int:
    cfg = load_config(args.config, args.overrides)
    train_ds, test_ds = runner.make_clean_data(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train_ds, out / "train.txt")
    save_dataset(test_ds, out / "test.txt")
    print(f"wrote {out / 'train.txt'} ({len(train_ds)} rows) and {out / 'test.txt'} ({len(test_ds)} rows)")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    cfg = load_config(args.config, args.overrides)
    clean = load_dataset(args.input) if args.input else runner.make_clean_data(cfg)[0]
    corrupted, audit = runner.corrupt(cfg, clean)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(corrupted, out / "corrupted.txt")
    (out / "audit.json").write_text(json.dumps(audit, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out / 'corrupted.txt'} and {out / 'audit.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    result = runner.run(cfg)
    print(f"{cfg.method}: final clean-test accuracy {result.final_accuracy:.2f}% ({result.wall_time:.1f}s) -> {cfg.output_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    path = Path(args.config)
    cfg = load_config(path, args.overrides)  # validates the base config and reports line numbers
    grid = parse_grid(args.grid)
    text = path.read_text(encoding="utf-8")
    summaries = runner.sweep(text, grid, str(path), cfg.output_dir, args.workers, args.overrides)
    for point, s in zip(runner.expand_grid(grid), summaries):
        desc = " ".join(f"{k}={v}" for k, v in point.items())
        print(f"{desc}: {s['final_accuracy']:.2f}%")
    return EXIT_OK


def cmd_report(args) -> int:
    sys.stdout.write(runner.render_report(args.results))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "corrupt": cmd_corrupt, "train": cmd_train, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, TrainingDivergedError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
