"""
Command-line entry point.

Stage subcommands run that stage of the pipeline together with whatever
it depends on, reusing cached results of unchanged stages. ``synth``
writes a synthetic dataset; ``benchmark --a/--b`` and
``evaluate --predictions`` also work on files produced elsewhere.

Exit codes: 0 success, 2 invalid input or arguments, 3 stage failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from floodcast import __version__
from floodcast.benchmark import benchmark_compare, read_skill_csv
from floodcast.errors import FloodcastError, StageError, ValidationError
from floodcast.io import load_dataset
from floodcast.manifest import RunManifest, load_run_config
from floodcast.metrics import SKILL_METRICS
from floodcast.pipeline import Pipeline, read_predictions_dir, skill_table, write_skill_reports
from floodcast.synthetic import write_synthetic_dataset

logger = logging.getLogger("floodcast")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_STAGE = 3

# Subcommand -> pipeline stage.
STAGE_COMMANDS = {
    "curate": "curate",
    "train": "pretrain",
    "finetune": "finetune",
    "predict": "predict",
    "evaluate": "evaluate",
    "forcing-shift": "forcing-shift",
    "thresholds": "thresholds",
    "verify-events": "verify-events",
    "benchmark": "benchmark",
}


def setup_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )


def _return_periods(text: str):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not a comma-separated list of numbers") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", type=Path, help="Dataset manifest (JSON)")
    common.add_argument("--out-dir", type=Path, default=Path("run"), help="Run directory (default: ./run)")
    common.add_argument("--seed", type=int, help="Override the manifest seed")
    common.add_argument("--threads", type=int, help="Worker threads for per-station work")
    common.add_argument("--config", type=Path, help="Run config (TOML or JSON) overriding manifest sections")
    common.add_argument("--force", action="store_true", help="Ignore cached stage results")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(
        prog="floodcast",
        description="Streamflow forecasting: curation, training, evaluation and flood-event verification",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  floodcast synth data/                           Write a synthetic dataset
  floodcast run --manifest data/manifest.json     Run every stage
  floodcast verify-events --manifest m.json --margin 1
  floodcast benchmark --a skill_a.csv --b skill_b.csv
        """,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    sub = subparsers.add_parser("run", parents=[common], help="Run every stage")
    _stage_flags(sub)

    subparsers.add_parser("curate", parents=[common], help="Deduplicate and quality-control stations")
    subparsers.add_parser("train", parents=[common], help="Pre-train on reanalysis forcings")
    subparsers.add_parser("finetune", parents=[common], help="Fine-tune on forecast forcings")
    sub = subparsers.add_parser("predict", parents=[common], help="Predict the test period")
    sub.add_argument("--hindcast-source", choices=("forecast", "reanalysis"))

    sub = subparsers.add_parser("evaluate", parents=[common], help="Skill metrics against observations")
    sub.add_argument("--hindcast-source", choices=("forecast", "reanalysis"))
    sub.add_argument("--predictions", type=Path, help="Evaluate this directory of prediction CSVs instead")
    sub.add_argument("--name", default="external", help="Report name with --predictions (default: external)")

    sub = subparsers.add_parser("forcing-shift", parents=[common], help="Wasserstein distance of precipitation")
    sub.add_argument("--paired-wet-days", action="store_true", default=None)

    sub = subparsers.add_parser("thresholds", parents=[common], help="Fit return-period flood thresholds")
    sub.add_argument("--return-periods", type=_return_periods)

    sub = subparsers.add_parser("verify-events", parents=[common], help="Dual-threshold flood event tallies")
    sub.add_argument("--return-periods", type=_return_periods)
    sub.add_argument("--margin", type=int, help="Matching margin in days")
    sub.add_argument("--per-lead", action="store_true", help="Tally each lead time separately")

    sub = subparsers.add_parser("benchmark", parents=[common], help="Compare two skill tables")
    sub.add_argument("--a", type=Path, help="Skill CSV of model A")
    sub.add_argument("--b", type=Path, help="Skill CSV of model B")
    sub.add_argument("--metric", choices=SKILL_METRICS, default="kge_prime")
    sub.add_argument("--lead-time", type=int, default=1)

    sub = subparsers.add_parser("synth", parents=[common], help="Write a synthetic dataset and its manifest")
    sub.add_argument("directory", type=Path)
    sub.add_argument("--n-basins", type=int, default=12)
    sub.add_argument("--n-days", type=int, default=4383)
    sub.add_argument("--wet-bias", type=float, default=1.3)
    sub.add_argument("--start-date", default="2009-01-01")
    return parser


def _stage_flags(sub: argparse.ArgumentParser):
    sub.add_argument("--hindcast-source", choices=("forecast", "reanalysis"))
    sub.add_argument("--paired-wet-days", action="store_true", default=None)
    sub.add_argument("--return-periods", type=_return_periods)
    sub.add_argument("--margin", type=int, help="Matching margin in days")
    sub.add_argument("--per-lead", action="store_true", help="Tally each lead time separately")


def run_config(args) -> dict:
    """Run config file merged with stage flags (flags win)"""
    config = load_run_config(args.config) if args.config else {}
    options = dict(config.get("options", {}))
    extremes = dict(config.get("extremes", {}))
    if getattr(args, "hindcast_source", None) is not None:
        options["hindcast_source"] = args.hindcast_source
    if getattr(args, "paired_wet_days", None):
        options["paired_wet_days"] = True
    if getattr(args, "per_lead", False):
        options["aggregate_lead_times"] = False
    if getattr(args, "return_periods", None):
        extremes["return_periods"] = args.return_periods
    if getattr(args, "margin", None) is not None:
        extremes["margin_days"] = args.margin
    config = dict(config)
    if options:
        config["options"] = options
    if extremes:
        config["extremes"] = extremes
    return config


def load_manifest(args) -> RunManifest:
    if args.manifest is None:
        raise ValidationError("'--manifest' is required for this command.")
    manifest = RunManifest.load(args.manifest)
    return manifest.with_overrides(seed=args.seed, threads=args.threads, run_config=run_config(args))


def cmd_synth(args):
    path = write_synthetic_dataset(
        args.directory,
        n_basins=args.n_basins,
        n_days=args.n_days,
        seed=args.seed or 0,
        start_date=args.start_date,
        wet_bias=args.wet_bias,
    )
    print(path)


def cmd_benchmark_files(args):
    result = benchmark_compare(read_skill_csv(args.a), read_skill_csv(args.b), args.metric, lead_time=args.lead_time)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    result.save(args.out_dir / "benchmark_rows.csv", args.out_dir / "benchmark_summary.json")
    logger.info("Wrote benchmark of %d stations to %s", len(result.rows), args.out_dir)


def cmd_evaluate_files(args):
    manifest = load_manifest(args)
    data = load_dataset(manifest, forcings=False, threads=int(manifest.option("threads")))
    table = skill_table(read_predictions_dir(args.predictions), data.records, manifest.periods["test"])
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_skill_reports(args.out_dir, args.name, table)
    logger.info("Wrote skill of %d station-lead pairs to %s", len(table), args.out_dir)


def cmd_stages(args):
    manifest = load_manifest(args)
    stages = None if args.command == "run" else [STAGE_COMMANDS[args.command]]
    pipeline = Pipeline(manifest, args.out_dir, force=args.force)
    pipeline.run(stages)
    logger.info("Done: %d stages executed, run directory %s", len(pipeline.executed), args.out_dir)


def dispatch(args):
    if args.command == "synth":
        return cmd_synth(args)
    if args.command == "benchmark" and (args.a or args.b):
        if not (args.a and args.b):
            raise ValidationError("'--a' and '--b' must be given together.")
        return cmd_benchmark_files(args)
    if args.command == "evaluate" and args.predictions is not None:
        return cmd_evaluate_files(args)
    return cmd_stages(args)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        dispatch(args)
    except ValidationError as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except StageError as exc:
        logger.error("%s", exc)
        return EXIT_INVALID if isinstance(exc.__cause__, ValidationError) else EXIT_STAGE
    except (FloodcastError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
