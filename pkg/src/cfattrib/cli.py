"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from collections.abc import Sequence
from dataclasses import replace

from cfattrib.attribution import CF_SHAPLEY_MC, METHODS
from cfattrib.errors import CFAttribError, StageError
from cfattrib.graph import ad_matching_graph, load_graph
from cfattrib.models import SCMConfig, fit_scm
from cfattrib.outliers import compare_daily_models, detect_outliers, fit_daily_model
from cfattrib.pipeline import (
    RunConfig,
    execute_pipeline,
    load_manifest_config,
    read_panel_csv,
    save_panel_csv,
    simulated_panel,
)
from cfattrib.report import write_json, write_report
from cfattrib.simulation import (
    BURN_IN,
    CF_SHAPLEY_TRUE_SCM,
    CONFIGS,
    DEFAULT_METHODS,
    run_accuracy_experiment,
)


def _fmt(path: str) -> str:
    return "json" if str(path).endswith(".json") else "csv"


def _parse_reference(value: str) -> str | int:
    if value in ("lag7", "lag14"):
        return value
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--reference must be lag7, lag14 or a day, got {value!r}") from None


def _params(text: str | None) -> dict:
    return json.loads(text) if text else {}


def cmd_simulate(args) -> None:
    spec = {"k": args.k, "T": args.T, "sigma": args.sigma, "seed": args.seed}
    if args.config != "none":
        spec["config"] = args.config
    panel, info = simulated_panel(spec)
    save_panel_csv(panel, args.out)
    if args.info:
        write_json(info, args.info)


def cmd_fit(args) -> None:
    panel, _ = read_panel_csv(args.data)
    graph = load_graph(args.graph) if args.graph else ad_matching_graph(panel.categories)
    stop = args.train_end if args.train_end is not None else panel.T
    scm = fit_scm(
        graph,
        panel,
        SCMConfig(args.regressor, _params(args.params), train_range=(graph.max_lag, stop)),
    )
    write_json(scm.summary(), args.out)


def cmd_detect(args) -> None:
    panel, first_day = read_panel_csv(args.data)
    train_end = (args.train_end - first_day) if args.train_end is not None else panel.T
    params = {"seed": args.seed} if args.regressor == "mlp" else {}
    model = fit_daily_model(panel, args.regressor, train_range=(BURN_IN, train_end), **params)
    start = (args.start - first_day) if args.start is not None else model.validation_days[1]
    end = (args.end - first_day) if args.end is not None else panel.T - 1
    report = detect_outliers(model, panel, range(start, end + 1), level=args.level)
    if first_day:
        report = replace(report, rows=tuple(replace(r, day=r.day + first_day) for r in report.rows))
    write_report(report, _fmt(args.out), args.out)


def _flagged_days(path: str) -> list[int]:
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            return [int(d) for d in json.load(fh)["flagged_days"]]
    with open(path, encoding="utf-8", newline="") as fh:
        return [int(row["day"]) for row in csv.DictReader(fh) if row["flagged"] == "true"]


def cmd_attribute(args) -> None:
    days = list(args.day or [])
    if args.outliers:
        days += _flagged_days(args.outliers)
    if args.outliers and not days:
        print("cfattrib: no flagged days to attribute", file=sys.stderr)
        return
    config = RunConfig(
        data_path=args.data,
        graph_path=args.graph,
        days=tuple(sorted(set(days))) or None,
        reference=args.reference,
        regressor=args.regressor,
        regressor_params=_params(args.params),
        methods=tuple(args.method or (CF_SHAPLEY_MC,)),
        M=args.M,
        seed=args.seed,
        out=args.out,
        detect=False,
    )
    execute_pipeline(config)


def cmd_bench(args) -> None:
    rows, _ = run_accuracy_experiment(
        methods=tuple(args.method or DEFAULT_METHODS),
        sigmas=tuple(args.sigma or (0.1, 1.0, 10.0)),
        trials=args.trials,
        seed=args.seed,
        configs=tuple(args.config or CONFIGS),
        n_jobs=args.jobs,
    )
    write_report(rows, _fmt(args.out), args.out)


def cmd_report(args) -> None:
    panel, _ = read_panel_csv(args.data)
    holdout = range(panel.T - args.holdout, panel.T)
    table = compare_daily_models(panel, holdout, seed=args.seed)
    write_report(table, _fmt(args.out), args.out)


def cmd_run(args) -> None:
    if args.manifest:
        config = load_manifest_config(args.manifest, out=args.out)
    else:
        with open(args.config_file, encoding="utf-8") as fh:
            doc = json.load(fh)
        if args.out:
            doc["out"] = args.out
        config = RunConfig.from_dict(doc)
    execute_pipeline(config)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfattrib", description="Counterfactual Shapley attribution of metric changes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic ad-matching panel CSV")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--config", choices=("none",) + CONFIGS, default="none", help="intervention applied to the last day")
    p.add_argument("--info", help="optional JSON path for truncation and intervention details")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the structural models and write their summary")
    p.add_argument("--data", required=True)
    p.add_argument("--graph")
    p.add_argument("--regressor", choices=("linear", "mlp"), default="linear")
    p.add_argument("--params", help="regressor hyperparameters as JSON")
    p.add_argument("--train-end", type=int, help="first day index excluded from training")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("detect", help="flag days outside the daily-density prediction interval")
    p.add_argument("--data", required=True)
    p.add_argument("--regressor", choices=("linear", "mlp"), default="linear")
    p.add_argument("--train-end", type=int, help="first day excluded from training")
    p.add_argument("--start", type=int)
    p.add_argument("--end", type=int)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help=".csv or .json")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("attribute", help="attribute the change on one or more days")
    p.add_argument("--data", required=True)
    p.add_argument("--graph")
    p.add_argument("--day", type=int, action="append", help="day to attribute (repeatable; default last day)")
    p.add_argument("--outliers", help="outlier report whose flagged days are attributed")
    p.add_argument("--reference", type=_parse_reference, default="lag7")
    p.add_argument("--method", choices=METHODS, action="append")
    p.add_argument("--M", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--regressor", choices=("linear", "mlp"), default="linear")
    p.add_argument("--params", help="regressor hyperparameters as JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("bench", help="category attribution accuracy on the synthetic benchmark")
    p.add_argument("--method", choices=METHODS + (CF_SHAPLEY_TRUE_SCM,), action="append")
    p.add_argument("--sigma", type=float, action="append")
    p.add_argument("--config", choices=CONFIGS, action="append")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, help="worker count (default from CFATTRIB_THREADS)")
    p.add_argument("--out", required=True, help=".csv or .json")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="daily-density model comparison table")
    p.add_argument("--data", required=True)
    p.add_argument("--holdout", type=int, default=100, help="number of final days held out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help=".csv or .json")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="full pipeline from a config file or a previous manifest")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config-file")
    src.add_argument("--manifest")
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except StageError as exc:
        print(f"cfattrib {args.command}: {exc}", file=sys.stderr)
        return 1
    except (CFAttribError, ValueError, KeyError, OSError) as exc:
        print(f"cfattrib {args.command}: [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
