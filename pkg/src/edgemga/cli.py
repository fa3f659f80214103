"""Command line entry point: ``edgemga {make-data,train,attack,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, save_checkpoint
from .data import DatasetError, load_dataset, make_glyphs, save_idx, save_png_dir
from .experiment import ConfigError, load_config, report, run_experiment
from .models import SPECS, ConvNetClassifier

logger = logging.getLogger("edgemga")


def _cmd_make_data(args) -> int:
    X, y = make_glyphs(args.n, seed=args.seed)
    if args.format == "png":
        save_png_dir(args.out, X, y)
    else:
        save_idx(args.out, X, y)
    print(f"wrote {len(y)} images to {args.out}")
    return 0


def _cmd_train(args) -> int:
    X, y, _ = load_dataset(args.data, args.format, SPECS[args.spec].n_classes)
    model = ConvNetClassifier(
        spec=args.spec,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        label_smoothing=args.label_smoothing,
        random_state=args.seed,
    ).fit(X, y)
    save_checkpoint(model, args.out)
    print(
        f"{args.spec}: train accuracy {model.train_accuracy_:.4f}, "
        f"validation accuracy {model.validation_accuracy_:.4f} -> {args.out}"
    )
    return 0


def _cmd_attack(args) -> int:
    cfg = load_config(args.config)
    summary = run_experiment(cfg)
    print(
        f"{summary['n_images']} images, success rate {summary['success_rate']}, "
        f"avg queries {summary['avg_queries']} -> {cfg.output}"
    )
    return 0


def _cmd_report(args) -> int:
    summary = report(args.input)
    for key, value in summary.items():
        print(f"{key}: {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgemga", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="render a procedural glyph dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n", type=int, default=12000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("png", "idx"), default="idx")
    p.set_defaults(func=_cmd_make_data)

    p = sub.add_parser("train", help="train a classifier and write a checkpoint")
    p.add_argument("--spec", required=True, choices=sorted(SPECS))
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("auto", "png", "idx"), default="auto")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.03)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("attack", help="run the attack pipeline from a config file")
    p.add_argument("--config", required=True, type=Path)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("report", help="re-aggregate CSVs of an attack output directory")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, DatasetError, FileNotFoundError) as exc:
        print(f"edgemga {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
