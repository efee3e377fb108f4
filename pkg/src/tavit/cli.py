"""Command-line entry point: ``tavit <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .checkpoint import CheckpointError
from .config import VARIANTS, ConfigError, load_config
from .volume_io import VolumeFormatError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("tavit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.add_argument("--image-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patients", type=int)
    p.add_argument("--slices", type=int, help="axial slices per patient after downsampling")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tavit", description="Tumor-aware T1C synthesis on phantom MRI.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate the phantom dataset, manifest and split")
    _common(p)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("stage", choices=("seg", "latent", "tavit"))
    p.add_argument("--variant", choices=VARIANTS, help="synthesis variant for stage 'tavit'")
    _common(p)

    p = sub.add_parser("infer", help="write predicted T1C volumes for a split")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--checkpoint", help="checkpoint path (default: the variant's trained model)")
    _common(p)

    p = sub.add_parser("evaluate", help="metrics, aggregates with p-values and violin data")
    p.add_argument("--variant", action="append", choices=VARIANTS,
                   help="variant to evaluate (repeatable; default: every variant with predictions)")
    _common(p)

    p = sub.add_parser("report", help="print the aggregate tables")
    _common(p)
    return parser


def _config(args):
    overrides = dict(seed=args.seed, data_dir=args.data_dir, out_dir=args.out_dir,
                     image_size=args.image_size, epochs=args.epochs, batch_size=args.batch_size,
                     patients=args.patients, slices=args.slices)
    variant = getattr(args, "variant", None)
    if isinstance(variant, str):
        overrides["variant"] = variant
    return load_config(args.config, **overrides)


def run(args) -> int:
    cfg = _config(args)
    if args.command == "gen-data":
        digest = pipeline.gen_data(cfg)
        print(f"dataset {cfg.data_dir}: {cfg.patients} patients, hash {digest}")
    elif args.command == "train":
        if args.stage == "seg":
            out = pipeline.train_segmentation(cfg)
        elif args.stage == "latent":
            out = pipeline.train_latent(cfg)
        else:
            out = pipeline.train_synthesis(cfg, cfg.variant)
        print(f"wrote {out}")
    elif args.command == "infer":
        paths = pipeline.infer(cfg, cfg.variant, args.split, args.checkpoint)
        print(f"wrote {len(paths)} predicted volumes for {cfg.variant}")
    elif args.command == "evaluate":
        out = pipeline.evaluate(cfg, args.variant)
        print(f"wrote report to {out}")
    elif args.command == "report":
        print(pipeline.summarize(cfg))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return run(args)
    except (ConfigError, pipeline.ValidationError, CheckpointError, VolumeFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (pipeline.RunFailure, FloatingPointError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
