"""Command-line entry point: ``mangrovewatch <stage> --config run.yaml [...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from mangrovewatch import pipeline
from mangrovewatch.config import dump_config, load_config
from mangrovewatch.errors import ConfigurationError, DependencyError, MangroveWatchError

LOGGER = logging.getLogger("mangrovewatch")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DEPENDENCY = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML pipeline config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set train.max_epochs=30 (repeatable)")
    p.add_argument("--seed", type=int, help="seed for splitting and training")
    p.add_argument("--workers", type=int, default=1, help="bound on data-pipeline parallelism")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mangrovewatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="cloud-filter, pick low-tide window, composite one year")
    _common(p)
    p.add_argument("--year", type=int, required=True)

    p = sub.add_parser("tile", help="cut the label-year composite into training/validation tiles")
    _common(p)

    p = sub.add_parser("train", help="train UNet++ and keep the best checkpoint")
    _common(p)

    p = sub.add_parser("predict", help="whole-scene inference for every (or one) composite year")
    _common(p)
    p.add_argument("--year", type=int, action="append", help="restrict to these years (repeatable)")

    p = sub.add_parser("evaluate", help="accuracy of one year's prediction against a reference mask")
    _common(p)
    p.add_argument("--year", type=int, required=True)
    p.add_argument("--truth", type=Path, help="reference mask (defaults to paths.truth)")

    p = sub.add_parser("analyze", help="area series, change tables, carbon and change map")
    _common(p)

    p = sub.add_parser("report", help="collect stage reports into a summary")
    _common(p)

    p = sub.add_parser("synthesize", help="write a synthetic demo dataset and matching config")
    p.add_argument("directory", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--years", type=int, nargs="+", default=list(range(2017, 2025)))
    p.add_argument("--months", type=int, nargs="+", default=list(range(1, 13)))
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _load(args) -> "pipeline.PipelineConfig":
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"dataset.seed={args.seed}", f"train.seed={args.seed}"]
    return load_config(args.config, overrides)


def _synthesize(args) -> dict:
    from mangrovewatch.config import PipelineConfig
    from mangrovewatch.synthetic import build_demo_workspace

    root = args.directory
    paths = build_demo_workspace(
        root, years=args.years, shape=(args.size, args.size), seed=args.seed, months=args.months,
        label_year=args.years[min(3, len(args.years) - 1)],
    )
    cfg = PipelineConfig()
    cfg.paths.manifest = str(paths["manifest"].relative_to(root))
    cfg.paths.labels = str(paths["labels"].relative_to(root))
    cfg.paths.regions = str(paths["regions"].relative_to(root))
    cfg.paths.truth = str(paths["truth"].relative_to(root))
    # small network and an lr scaled for a handful of tiles; see README
    cfg.dataset.stride = 128
    cfg.dataset.label_year = args.years[min(3, len(args.years) - 1)]
    cfg.model.depth, cfg.model.base_width = 3, 4
    cfg.train.lr0, cfg.train.lr_min, cfg.train.max_epochs = 1e-2, 1e-3, 30
    return {"config": dump_config(cfg, root / "config.yaml"), **paths}


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synthesize":
            outputs = _synthesize(args)
        else:
            cfg = _load(args)
            pipeline.set_threads(args.workers)
            if args.command == "preprocess":
                outputs = pipeline.run_preprocess(cfg, args.year)
            elif args.command == "tile":
                outputs = pipeline.run_tile(cfg)
            elif args.command == "train":
                outputs = pipeline.run_train(cfg, args.workers)
            elif args.command == "predict":
                outputs = pipeline.run_predict(cfg, args.year)
            elif args.command == "evaluate":
                outputs = pipeline.run_evaluate(cfg, args.year, args.truth)
            elif args.command == "analyze":
                outputs = pipeline.run_analyze(cfg)
            else:
                outputs = pipeline.run_report(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except MangroveWatchError as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    for name, path in outputs.items():
        print(f"{name}\t{path}")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
