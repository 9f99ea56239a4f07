# Command-line interface: generate a zoo, compute measures on a model or a
# whole zoo, and score measures against zoos.
#
# Exit codes: 0 success, 1 usage error or unreadable input, 2 some measure
# or score failed.

import argparse
import sys
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NoReturn, Optional

from .common import (
    DEFAULT_MARGIN_RESTARTS,
    DEFAULT_MARGIN_SAMPLE_SIZE,
    DEFAULT_MARGIN_STEPS,
    DEFAULT_MAX_CONDITION_SIZE,
    DEFAULT_NOISE_SAMPLES,
    DEFAULT_NU,
    DEFAULT_PM_ITERS,
    DEFAULT_PM_TOLERANCE,
    GenMeasuresError,
    UnknownMeasureError,
)
from .evaluation import (
    conditional_mi_score,
    rank_correlation,
    subset_label,
)
from .fileformats import (
    Zoo,
    load_dataset,
    load_manifest,
    load_model,
    save_manifest,
    write_report,
)
from .logging_utils import logger
from .margins import MarginSolverConfig
from .measures import (
    MEASURES,
    MeasureContext,
    check_measure_names,
    compute_measures,
)
from .network import OutputMarginConfig
from .noise import NoiseConfig
from .norms import PowerMethodConfig
from .parallel import default_worker_count
from .zoo import build_default_zoo, default_zoo_sweep

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2


class ArgumentParser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; 2 means partial
    failure here, so usage errors exit with 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    model: Optional[Path] = None
    data: Optional[Path] = None
    zoo: tuple[Path, ...] = ()
    measures: tuple[str, ...] = ()
    noise: NoiseConfig = NoiseConfig()
    margin: MarginSolverConfig = MarginSolverConfig()
    power: PowerMethodConfig = PowerMethodConfig()
    output_margin: OutputMarginConfig = OutputMarginConfig()
    max_condition_size: int = DEFAULT_MAX_CONDITION_SIZE
    seed: int = 0
    workers: int = 1
    replicates: Optional[int] = None
    out: Optional[Path] = None
    csv: bool = False
    quiet: bool = False

    def context(self) -> MeasureContext:
        return MeasureContext(
            self.noise,
            self.margin,
            self.power,
            self.output_margin,
            workers=self.workers,
            quiet=self.quiet,
        )


def _measure_list(value: str) -> list[str]:
    return [n.strip() for n in value.split(",") if n.strip()]


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="genmeasures",
        description="Generalization measures for trained networks and "
        "their conditional mutual information score over model zoos",
    )
    sub = parser.add_subparsers(
        dest="subcommand", required=True, parser_class=ArgumentParser
    )

    def common(p: ArgumentParser, seed_required: bool) -> None:
        p.add_argument(
            "--seed",
            type=int,
            required=seed_required,
            default=0,
            help="Global seed for noise draws, solvers and training",
        )
        p.add_argument(
            "--workers",
            type=int,
            default=None,
            help="Worker processes (default: number of CPUs)",
        )
        p.add_argument("--out", type=Path, help="Report file (JSON)")
        p.add_argument(
            "--csv",
            action="store_true",
            help="Also write a flat CSV table next to the report",
        )
        p.add_argument(
            "--quiet", action="store_true", help="Only log warnings"
        )

    def measure_flags(p: ArgumentParser) -> None:
        p.add_argument(
            "--measures",
            type=_measure_list,
            default=[],
            help="Comma-separated measure names (default: all)",
        )
        p.add_argument("--nu", type=float, default=DEFAULT_NU)
        p.add_argument(
            "--noise-samples", type=int, default=DEFAULT_NOISE_SAMPLES
        )
        p.add_argument(
            "--margin-steps", type=int, default=DEFAULT_MARGIN_STEPS
        )
        p.add_argument(
            "--margin-restarts", type=int, default=DEFAULT_MARGIN_RESTARTS
        )
        p.add_argument(
            "--margin-samples",
            type=int,
            default=DEFAULT_MARGIN_SAMPLE_SIZE,
            help="Examples solved by the per-example margin measures",
        )
        p.add_argument(
            "--margin-aggregation",
            choices=("median", "mean", "min"),
            default="median",
            help="Aggregate of the output margins used by fast-log-spec and "
            "margin-jacobian (default: median)",
        )
        p.add_argument(
            "--all-examples",
            action="store_true",
            help="Aggregate output margins over misclassified examples too",
        )
        p.add_argument("--pm-iters", type=int, default=DEFAULT_PM_ITERS)
        p.add_argument("--pm-tol", type=float, default=DEFAULT_PM_TOLERANCE)

    def score_flags(p: ArgumentParser) -> None:
        p.add_argument(
            "--max-cond-size",
            type=int,
            default=DEFAULT_MAX_CONDITION_SIZE,
            help="Largest conditioning hyperparameter subset",
        )

    p = sub.add_parser("gen-zoo", help="Train the default model zoo")
    p.add_argument(
        "--zoo", type=Path, required=True, help="Manifest to write"
    )
    p.add_argument("--replicates", type=int, default=None)
    common(p, True)

    p = sub.add_parser("measure", help="Compute measures")
    p.add_argument("--model", type=Path, help="Model file")
    p.add_argument("--data", type=Path, help="Dataset file")
    p.add_argument(
        "--zoo",
        type=Path,
        action="append",
        default=[],
        help="Manifest whose entries get measure values",
    )
    measure_flags(p)
    common(p, True)

    p = sub.add_parser("score", help="Score measures against zoos")
    p.add_argument(
        "--zoo",
        type=Path,
        action="append",
        required=True,
        help="Zoo manifest (repeat for several tasks)",
    )
    p.add_argument(
        "--measures",
        type=_measure_list,
        default=[],
        help="Comma-separated measure names (default: all)",
    )
    score_flags(p)
    common(p, False)

    p = sub.add_parser("all", help="gen-zoo, measure and score in one run")
    p.add_argument(
        "--zoo", type=Path, required=True, help="Manifest to write"
    )
    p.add_argument("--replicates", type=int, default=None)
    measure_flags(p)
    score_flags(p)
    common(p, True)

    sub.add_parser("list-measures", help="Print the measure names")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Builds the run configuration.  Raises UnknownMeasureError and
    InvalidConfigError for bad values."""
    measures = tuple(check_measure_names(getattr(args, "measures", [])))
    seed = getattr(args, "seed", 0)
    workers = getattr(args, "workers", None)
    if workers is None:
        workers = default_worker_count()
    kw: dict[str, Any] = {}
    if hasattr(args, "nu"):
        kw["noise"] = NoiseConfig(args.nu, args.noise_samples, seed)
        kw["margin"] = MarginSolverConfig(
            max_steps=args.margin_steps,
            num_restarts=args.margin_restarts,
            sample_size=args.margin_samples,
            seed=seed,
        )
        # the power method always starts from seed 0
        kw["power"] = PowerMethodConfig(args.pm_iters, args.pm_tol)
        kw["output_margin"] = OutputMarginConfig(
            args.margin_aggregation, not args.all_examples
        )
    if hasattr(args, "max_cond_size"):
        kw["max_condition_size"] = args.max_cond_size
    zoo = getattr(args, "zoo", None) or []
    if isinstance(zoo, Path):
        zoo = [zoo]
    return RunConfig(
        args.subcommand,
        model=getattr(args, "model", None),
        data=getattr(args, "data", None),
        zoo=tuple(zoo),
        measures=measures,
        seed=seed,
        workers=max(1, workers),
        replicates=getattr(args, "replicates", None),
        out=getattr(args, "out", None),
        csv=getattr(args, "csv", False),
        quiet=getattr(args, "quiet", False),
        **kw,
    )


def _measure_rows(
    report: dict[str, Any], model_id: str
) -> list[list[Any]]:
    return [
        [
            model_id,
            name,
            rec["value"],
            rec["wall_time_s"],
            rec["error"]["type"] if rec["error"] else "",
        ]
        for name, rec in report.items()
    ]


def run_gen_zoo(config: RunConfig) -> tuple[dict[str, Any], int]:
    sweep = default_zoo_sweep()
    entries = build_default_zoo(
        config.seed, config.replicates, config.workers, sweep
    )
    manifest = config.zoo[0]
    task = {
        "sweep": sweep.to_dict(),
        "seed": config.seed,
        "replicates": config.replicates or sweep.replicates,
    }
    save_manifest(entries, manifest, task)
    report = {
        "manifest": str(manifest),
        "num_models": len(entries),
        "did_not_fit": [e.model_id for e in entries if e.did_not_fit],
    }
    return report, EXIT_OK


def _measure_zoo(
    config: RunConfig, zoo: Zoo, ctx: MeasureContext
) -> dict[str, Any]:
    models: dict[str, Any] = {}
    for entry in zoo.entries:
        records = compute_measures(
            ctx,
            zoo.model(entry),
            zoo.train_data(entry),
            config.measures,
            entry.model_id,
        )
        for name, rec in records.items():
            if rec["error"] is None:
                entry.measure_values[name] = rec["value"]
        models[entry.model_id] = records
    return models


def run_measure(config: RunConfig) -> tuple[dict[str, Any], int]:
    """Computes measures on one model (``model`` + ``data``) or on every
    entry of the given zoo manifests, which are updated in place."""
    ctx = config.context()
    report: dict[str, Any] = {"seed": config.seed, "models": {}}
    if config.model is not None and config.data is not None:
        net = load_model(config.model)
        data = load_dataset(config.data)
        data.check_network(net)
        report["models"][config.model.stem] = compute_measures(
            ctx, net, data, config.measures, config.model.stem
        )
    elif config.zoo:
        for path in config.zoo:
            zoo = load_manifest(path)
            report["models"].update(_measure_zoo(config, zoo, ctx))
            save_manifest(zoo.entries, path, zoo.task, write_files=False)
    report["messages"] = ctx.to_return()
    failed = bool(ctx.errors)
    return report, EXIT_PARTIAL if failed else EXIT_OK


def run_score(config: RunConfig) -> tuple[dict[str, Any], int]:
    """One report section per measure, with a per-task breakdown and the
    cross-task mean when several zoos are given."""
    zoos = [
        (str(path), load_manifest(path, verify_models=False))
        for path in config.zoo
    ]
    measures = config.measures or tuple(MEASURES)
    report: dict[str, Any] = {"measures": {}}
    status = EXIT_OK
    for name in measures:
        section: dict[str, Any] = {"tasks": {}}
        scores = []
        for label, zoo in zoos:
            try:
                cmi = conditional_mi_score(
                    zoo.entries, name, config.max_condition_size
                )
                tau = rank_correlation(zoo.entries, name)
            except GenMeasuresError as e:
                logger.error(f"{label}: {name}: {e}")
                section["tasks"][label] = {
                    "error": {"type": type(e).__name__, "message": str(e)}
                }
                status = EXIT_PARTIAL
                continue
            scores.append(cmi.score)
            section["tasks"][label] = {
                "score": cmi.score,
                "min_subset": subset_label(cmi.min_subset),
                "num_pairs": cmi.num_pairs,
                "kendall_tau": tau,
                "per_subset": {
                    key: {
                        "score": s.score,
                        "gap_entropy": s.gap_entropy,
                        "agreement_rate": s.agreement_rate,
                        "num_pairs": s.num_pairs,
                        "cells_used": s.cells_used,
                        "cells_skipped": s.cells_skipped,
                    }
                    for key, s in cmi.per_condition.items()
                },
                "warnings": list(cmi.warnings),
            }
        if len(zoos) > 1 and len(scores) == len(zoos):
            section["mean_score"] = sum(scores) / len(scores)
        report["measures"][name] = section
    return report, status


def _score_rows(report: dict[str, Any]) -> list[list[Any]]:
    rows: list[list[Any]] = [["measure", "zoo", "score", "kendall_tau"]]
    for name, section in report["measures"].items():
        for label, task in section["tasks"].items():
            rows.append(
                [name, label, task.get("score"), task.get("kendall_tau")]
            )
    return rows


def run_all(config: RunConfig) -> tuple[dict[str, Any], int]:
    gen_report, _ = run_gen_zoo(config)
    measure_report, measure_status = run_measure(config)
    score_report, score_status = run_score(config)
    score_report["zoo"] = gen_report
    score_report["models"] = measure_report["models"]
    score_report["messages"] = measure_report["messages"]
    return score_report, max(measure_status, score_status)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.subcommand == "list-measures":
        for name in MEASURES:
            print(name)
        return EXIT_OK
    try:
        config = config_from_args(args)
    except UnknownMeasureError as e:
        parser.print_usage(sys.stderr)
        print(f"genmeasures: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except GenMeasuresError as e:
        print(f"genmeasures: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if config.subcommand == "measure" and (
        (config.model is None and not config.zoo)
        or (config.model is not None and config.data is None)
    ):
        parser.print_usage(sys.stderr)
        print(
            "genmeasures: error: measure needs --model with --data, or --zoo",
            file=sys.stderr,
        )
        return EXIT_USAGE
    runners = {
        "gen-zoo": run_gen_zoo,
        "measure": run_measure,
        "score": run_score,
        "all": run_all,
    }
    try:
        report, status = runners[config.subcommand](config)
    except (GenMeasuresError, OSError) as e:
        # unreadable or invalid input files
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_USAGE
    rows = None
    if config.csv:
        if config.subcommand in ("score", "all"):
            rows = _score_rows(report)
        elif config.subcommand == "measure":
            rows = [["model", "measure", "value", "wall_time_s", "error"]]
            for model_id, records in report["models"].items():
                rows.extend(_measure_rows(records, model_id))
    out = config.out
    if out is None and config.subcommand == "all":
        out = config.zoo[0].parent / "report.json"
    write_report(out, report, rows)
    return status


if __name__ == "__main__":
    sys.exit(main())
