#!/usr/bin/env python3
"""
Command Line Interface for the disc grading pipeline
Provides access to every pipeline stage
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

# Add project root to path
sys.path.append(str(Path(__file__).parent))

from config.run_config import Preset
from config.settings import settings
from data.splitting import DEFAULT_FRACTIONS
from data.types import Partition
from main import DiscGradePipeline
from utils.exceptions import ConfigError, DiscGradeError
from utils.logger import get_logger, setup_logging

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURE = 2


class UsageError(Exception):
    """Unknown flag, missing argument or bad value on the command line."""


class DiscGradeArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises on usage errors instead of exiting with status 2"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class DiscGradeCLI:
    """Command line interface for the grading pipeline"""

    def __init__(self, args: argparse.Namespace):
        self.logger = get_logger(__name__)
        self.settings = settings
        self.args = args
        config_file = getattr(args, "config", None) or args.global_config
        self.pipeline = DiscGradePipeline(
            seed=getattr(args, "seed", None),
            config_file=self.path(config_file),
            preset=getattr(args, "preset", None),
        )

    def path(self, value: Optional[str]) -> Optional[str]:
        return self.settings.resolve_data_path(value) if value else None

    def gen_phantom(self):
        args = self.args
        self.pipeline.generate_phantom(
            args.out, args.patients, args.image_size, args.slices
        )
        print(f"Phantom written to {args.out}")

    def preprocess(self):
        index = self.pipeline.preprocess(self.path(self.args.manifest), self.args.out)
        print(f"ROIs indexed in {index}")

    def split(self):
        manifest = self.path(self.args.manifest)
        out = self.args.out or str(Path(manifest).parent / "split.csv")
        path = self.pipeline.make_split(manifest, out, tuple(self.args.fractions))
        print(f"Split written to {path}")

    def train(self):
        args = self.args
        manifest, split = self.path(args.manifest), self.path(args.split)
        if args.command == "pretrain":
            result = self.pipeline.pretrain(manifest, split, args.out, args.epochs)
        elif args.command == "finetune":
            pretrained = self.path(args.pretrained)
            result = self.pipeline.finetune(
                manifest, split, pretrained, args.out, args.epochs
            )
        elif args.command == "train-scratch":
            result = self.pipeline.train_scratch(manifest, split, args.out, args.epochs)
        else:
            result = self.pipeline.train_roi(manifest, split, args.out, args.epochs)
        print(
            f"{args.command}: best epoch {result.best_epoch}, "
            f"checkpoint {result.best_checkpoint}"
        )

    def probe(self):
        args = self.args
        result = self.pipeline.probe(
            self.path(args.ckpt),
            self.path(args.manifest),
            self.path(args.split),
            args.out,
            args.epochs,
        )
        print(
            f"Linear probe balanced accuracy {result.metrics['balanced_accuracy']:.4f} "
            f"(majority baseline {result.baseline['balanced_accuracy']:.4f})"
        )

    def evaluate(self):
        args = self.args
        out = args.out or str(Path(self.path(args.ckpt)).parent / "evaluation")
        result = self.pipeline.evaluate(
            self.path(args.ckpt),
            self.path(args.manifest),
            self.path(args.split),
            out,
            partition=args.partition,
            use_predicted_coords=args.use_predicted_coords,
            roi_checkpoint=self.path(args.roi_ckpt),
            slices_per_disc=args.slices_per_disc,
        )
        summary = result.metrics["ground_truth_coords"]
        sn = summary["severe_to_normal"]
        print(
            f"Balanced accuracy {summary['balanced_accuracy']:.4f}, "
            f"severe-to-normal {sn['numerator']}/{sn['denominator']} -> {out}"
        )

    def report(self):
        bundle = self.pipeline.report(self.path(self.args.run), self.args.out)
        print(f"Report written to {bundle.out_dir} ({len(bundle.files)} files)")

    def run_all(self):
        args = self.args
        metrics = self.pipeline.run_all(
            args.out, args.patients, args.image_size, args.slices
        )
        accuracy = metrics["ground_truth_coords"]["balanced_accuracy"]
        print(f"run-all finished: balanced accuracy {accuracy:.4f} -> {args.out}")

    def run(self):
        handlers = {
            "gen-phantom": self.gen_phantom,
            "preprocess": self.preprocess,
            "split": self.split,
            "pretrain": self.train,
            "finetune": self.train,
            "train-scratch": self.train,
            "train-roi": self.train,
            "probe": self.probe,
            "evaluate": self.evaluate,
            "report": self.report,
            "run-all": self.run_all,
        }
        handlers[self.args.command]()


def _preset_flags(parser: argparse.ArgumentParser, default: Optional[Preset]):
    group = parser.add_mutually_exclusive_group()
    group.add_argument(
        "--tiny",
        dest="preset",
        action="store_const",
        const=Preset.TINY.value,
        help="Small CPU-scale models and inputs",
    )
    group.add_argument(
        "--standard",
        dest="preset",
        action="store_const",
        const=Preset.STANDARD.value,
        help="Full-size models and inputs",
    )
    parser.set_defaults(preset=default.value if default else None)


def _stage_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--manifest", required=True, help="Manifest CSV")
    parser.add_argument("--split", required=True, help="Split CSV")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument(
        "--config",
        dest="config",
        help="JSON or TOML config file (overrides the global one)",
    )
    parser.add_argument("--seed", type=int, help="Root seed")
    parser.add_argument("--epochs", type=int, help="Override the number of epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = DiscGradeArgumentParser(
        prog="disc-grade",
        description="Disc-level lumbar stenosis grading pipeline",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s gen-phantom --patients 200 --seed 0 --out runs/phantom
  %(prog)s split --manifest runs/phantom/manifest.csv --seed 0 --out runs/split.csv
  %(prog)s pretrain --manifest runs/phantom/manifest.csv --split runs/split.csv \\
      --out runs/pretrain --tiny
  %(prog)s evaluate --ckpt runs/finetune/best.safetensors \\
      --manifest runs/phantom/manifest.csv --split runs/split.csv
  %(prog)s run-all --out runs/demo --seed 7
        """,
    )
    parser.add_argument(
        "--log-level",
        default=None,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Console log level",
    )
    parser.add_argument(
        "--config", dest="global_config", help="JSON or TOML config file"
    )
    subparsers = parser.add_subparsers(
        dest="command", parser_class=DiscGradeArgumentParser, help="Available commands"
    )

    # Phantom
    gen = subparsers.add_parser(
        "gen-phantom", help="Render a synthetic labelled dataset"
    )
    gen.add_argument("--patients", type=int, default=200, help="Number of patients")
    gen.add_argument("--seed", type=int, default=0, help="Root seed")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument(
        "--image-size",
        type=int,
        default=None,
        help="Slice side length in pixels (default: 320)",
    )
    gen.add_argument("--slices", type=int, default=None, help="Slices per series (odd)")

    # Preprocess
    pre = subparsers.add_parser(
        "preprocess", help="Validate a manifest and export disc ROIs"
    )
    pre.add_argument("--manifest", required=True, help="Manifest CSV")
    pre.add_argument("--out", required=True, help="Output directory")

    # Split
    split = subparsers.add_parser(
        "split", help="Stratified disc-level train/val/test split"
    )
    split.add_argument("--manifest", required=True, help="Manifest CSV")
    split.add_argument("--seed", type=int, default=0, help="Root seed")
    split.add_argument(
        "--fractions",
        type=float,
        nargs=3,
        default=list(DEFAULT_FRACTIONS),
        metavar=("TRAIN", "VAL", "TEST"),
        help="Partition fractions",
    )
    split.add_argument(
        "--out", default=None, help="Split CSV (default: next to the manifest)"
    )

    # Training stages
    for name, help_text in (
        ("pretrain", "Contrastive encoder pretraining"),
        ("finetune", "Fine-tune a pretrained encoder for grading"),
        ("train-roi", "Train the disc center regressor"),
        ("train-scratch", "Train the grade classifier from random initialization"),
    ):
        stage = subparsers.add_parser(name, help=help_text)
        _stage_flags(stage)
        _preset_flags(stage, None)
        if name == "finetune":
            stage.add_argument(
                "--pretrained", required=True, help="Pretrain-stage checkpoint"
            )

    # Probe
    probe = subparsers.add_parser(
        "probe", help="Linear probe on a frozen pretrained encoder"
    )
    probe.add_argument("--ckpt", required=True, help="Pretrain-stage checkpoint")
    _stage_flags(probe)

    # Evaluate
    ev = subparsers.add_parser("evaluate", help="Evaluate a classifier checkpoint")
    ev.add_argument("--ckpt", required=True, help="Classifier checkpoint")
    ev.add_argument("--manifest", required=True, help="Manifest CSV")
    ev.add_argument("--split", required=True, help="Split CSV")
    ev.add_argument(
        "--partition",
        default=Partition.VAL.value,
        choices=[p.value for p in Partition],
    )
    ev.add_argument(
        "--use-predicted-coords",
        action="store_true",
        help="Crop around regressed disc centers",
    )
    ev.add_argument("--roi-ckpt", default=None, help="ROI regressor checkpoint")
    ev.add_argument(
        "--slices-per-disc",
        type=int,
        default=None,
        help="Odd number of slices pooled per disc",
    )
    ev.add_argument(
        "--out",
        default=None,
        help="Output directory (default: next to the checkpoint)",
    )

    # Report
    rep = subparsers.add_parser(
        "report", help="Render plots and tables for a run directory"
    )
    rep.add_argument("--run", required=True, help="Run directory")
    rep.add_argument(
        "--out", default=None, help="Output directory (default: RUN/report)"
    )

    # Everything
    run_all = subparsers.add_parser("run-all", help="Phantom to report in one run")
    run_all.add_argument("--out", required=True, help="Run directory")
    run_all.add_argument(
        "--patients", type=int, default=200, help="Number of phantom patients"
    )
    run_all.add_argument("--seed", type=int, default=0, help="Root seed")
    run_all.add_argument(
        "--image-size",
        type=int,
        default=None,
        help="Slice side length in pixels (default: 320)",
    )
    run_all.add_argument(
        "--slices", type=int, default=None, help="Slices per series (odd)"
    )
    _preset_flags(run_all, Preset.TINY)
    return parser


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run one command and map the outcome to an exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help
        return int(e.code or 0)

    if not args.command:
        parser.print_help()
        return EXIT_INVALID

    # Setup logging
    try:
        setup_logging(level=args.log_level)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    logger = get_logger(__name__)

    try:
        DiscGradeCLI(args).run()
    except (DiscGradeError, FileNotFoundError) as e:
        logger.error(f"❌ {args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:
        logger.exception(f"❌ {args.command} crashed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def main(argv: Optional[List[str]] = None):
    """Main CLI entry point"""
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
