"""
Command line interface.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 experiment failure.
"""
import argparse
import logging
import sys
from typing import List, Optional

import matplotlib

from .core import ConfigError, DataError, ExperimentError, TDCDetectorError

logger = logging.getLogger("tdc_detector")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_EXPERIMENT = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tdc-detector",
        description="Simulated TDC power side-channel threat detector",
    )
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--seed", type=int, help="override recipe.seed")
    parser.add_argument("--out", help="override recipe.output_dir")
    parser.add_argument("--full-scale", action="store_true", help="use the full victim population")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--progress", action="store_true", help="show progress bars")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-victims", help="generate and train the victim population")
    sub.add_parser("build-dataset", help="build the trace corpus")
    sub.add_parser("train-detector", help="train the detector on the corpus")
    sub.add_parser("eval", help="evaluate the detector on the test split")
    table = sub.add_parser("table", help="run a table reproduction")
    table.add_argument("name", choices=["rnn_sweep", "accuracy", "frequency", "location", "unseen"])
    cam = sub.add_parser("cam", help="per-class Grad-CAM report")
    cam.add_argument("--per-class", type=int, default=8)
    avoid = sub.add_parser("avoid", help="run the detection avoidance attack")
    avoid.add_argument("--inputs", type=int, default=1, help="number of attack inputs")
    sub.add_parser("calibrate-tdc", help="print the TDC calibration")
    return parser


def _load_detector(recipe):
    from .detector import DetectorModel

    path = recipe.out / "detector"
    if not (path / "detector.scnn").exists():
        raise DataError(f"No detector at {path}, run train-detector first")
    return DetectorModel.load(path)


def run(args: argparse.Namespace) -> int:
    from . import harness
    from .config import load_config
    from .tdc import calibrate
    from .utils import show_progress

    overrides = {"seed": args.seed, "output_dir": args.out, "full_scale": True if args.full_scale else None}
    config = load_config(args.config, overrides)
    recipe = config.recipe
    quiet = not show_progress(not args.progress)

    if args.command == "calibrate-tdc":
        calib = calibrate(recipe.tdc)
        print(calib.describe(recipe.tdc))
        return EXIT_OK

    manifest = harness.open_manifest(recipe)

    if args.command == "gen-victims":
        victims, _, _ = harness.gen_victims(recipe, manifest)
        print(f"{len(victims)} victims written to {recipe.out}")
    elif args.command == "build-dataset":
        corpus = harness.build_dataset(recipe, manifest, disable_progress=quiet)
        print(f"{len(corpus)} traces written to {recipe.out}")
    elif args.command == "train-detector":
        corpus = harness.load_corpus(recipe.out)
        harness.train_corpus_detector(recipe, corpus, manifest, disable_progress=quiet)
        print(f"Detector saved to {recipe.out / 'detector'}")
    elif args.command == "eval":
        corpus = harness.load_corpus(recipe.out)
        report = harness.evaluate_corpus(recipe, corpus, _load_detector(recipe), manifest)
        print(report.pretty())
    elif args.command == "table":
        result = harness.run_table(recipe, args.name, manifest=manifest, disable_progress=quiet)
        print(result.frame.to_string(index=False, float_format="%.1f"))
    elif args.command == "cam":
        corpus = harness.load_corpus(recipe.out)
        path = recipe.out / "cam.svg"
        traces = [corpus.traces[i] for i in corpus.test_idx]
        harness.cam_report(_load_detector(recipe), traces, corpus.labels[corpus.test_idx], path, args.per_class)
        manifest.add_output(recipe.out, path)
        manifest.write(recipe.out)
        print(f"CAM report written to {path}")
    elif args.command == "avoid":
        corpus = harness.load_corpus(recipe.out)
        results = harness.avoidance_experiment(
            recipe, config.avoidance, corpus, _load_detector(recipe), args.inputs, manifest, quiet
        )
        for r in results:
            print(f"{r.queries_used} queries, final benign rate {r.final_benign_rate:.3f}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    matplotlib.use("Agg")
    try:
        return run(args)
    except ConfigError as err:
        logger.error("Configuration error: %s", err)
        return EXIT_CONFIG
    except DataError as err:
        logger.error("Data error: %s", err)
        return EXIT_DATA
    except (ExperimentError, TDCDetectorError) as err:
        logger.error("Experiment failed: %s", err)
        return EXIT_EXPERIMENT


if __name__ == "__main__":
    sys.exit(main())
