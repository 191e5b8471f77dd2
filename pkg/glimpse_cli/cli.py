"""Command-line entrypoint for object-grounded reasoning experiments."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

from rich.console import Console
from rich.table import Table

from .config import (
    ExperimentConfig,
    Settings,
    config_hash,
    emit_config,
    ensure_runtime_directories,
    load_config,
    load_settings,
    override,
)
from .db import find_run, get_session, init_db, list_runs, record_run, run_to_dict
from .report import REPORT_TEMPLATE, builtin_template_dir, validate_template
from .runner import (
    EVAL_POLICIES,
    STAGES,
    SWEEP_COLUMNS,
    SWEEP_PARAMETERS,
    StageOutcome,
    parse_sweep_value,
    run_stage,
    run_sweep,
    stage_eval,
    stage_gen,
    summarise_sweep,
)
from .storage import write_csv, write_json


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )


def _prepare(settings: Settings) -> None:
    _configure_logging(settings.log_level)
    ensure_runtime_directories(settings)
    init_db(settings.db_url)


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(Path(args.config)) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = override(config, "seed", args.seed)
    return config


def _print_metrics(title: str, metrics: Mapping[str, float]) -> None:
    table = Table(title=title)
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    for name in sorted(metrics):
        table.add_row(name, f"{metrics[name]:.4f}")
    Console().print(table)


def _record(settings: Settings, config: ExperimentConfig, out_dir: Path, outcome: StageOutcome) -> int:
    with get_session(settings.db_url) as db:
        return record_run(db, outcome.stage, config.seed, config_hash(config), out_dir, outcome.metrics, outcome.artifacts)


def cmd_init() -> int:
    settings = load_settings()
    _prepare(settings)

    print("Initialized glimpse workspace")
    print(f"DB: {settings.db_url}")
    print(f"Output: {settings.output_dir}")
    print(f"Logs: {settings.log_dir}")
    return 0


def cmd_config_emit(out: Optional[Path]) -> int:
    payload = emit_config(ExperimentConfig())
    if out is None:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        write_json(out, payload)
        print(f"Wrote default config to {out}")
    return 0


def cmd_config_validate(config_path: Path) -> int:
    config = load_config(config_path)
    print(f"Config valid: {config_path} (hash {config_hash(config)})")
    return 0


def cmd_gen(args: argparse.Namespace) -> int:
    settings = load_settings()
    _prepare(settings)
    config = _experiment_config(args)
    out_dir = Path(args.out) if args.out else settings.output_dir

    outcome = stage_gen(config, out_dir)
    run_id = _record(settings, config, out_dir, outcome)
    print(f"Run ID: {run_id}")
    for path in outcome.artifacts:
        print(f"Wrote {path}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    settings = load_settings()
    _prepare(settings)
    config = _experiment_config(args)
    out_dir = Path(args.out) if args.out else settings.output_dir
    workers = args.workers or settings.workers

    if args.stage == "eval":
        out_dir.mkdir(parents=True, exist_ok=True)
        outcome = stage_eval(config, out_dir, workers, policy=args.policy)
    else:
        outcome = run_stage(args.stage, config, out_dir, workers)
    run_id = _record(settings, config, out_dir, outcome)

    print(f"Run ID: {run_id}")
    _print_metrics(f"{outcome.stage} metrics", outcome.metrics)
    return 0


def _split_values(raw: Sequence[str]) -> List[str]:
    values: List[str] = []
    for item in raw:
        values.extend(part.strip() for part in item.split(",") if part.strip())
    return values


def _print_sweep(parameter: str, summary: Sequence[Dict[str, Any]]) -> None:
    table = Table(title=f"Sweep over {parameter}")
    for column in ("value", "seeds", "accuracy", "reward"):
        table.add_column(column, justify="right")
    for row in summary:
        table.add_row(
            str(row["value"]),
            str(row["seeds"]),
            f"{row['accuracy_mean']:.4f} ± {row['accuracy_std']:.4f}",
            f"{row['reward_mean']:.4f} ± {row['reward_std']:.4f}",
        )
    Console().print(table)


def cmd_sweep(args: argparse.Namespace) -> int:
    settings = load_settings()
    _prepare(settings)
    config = _experiment_config(args)
    out_dir = Path(args.out) if args.out else settings.output_dir
    workers = args.workers or settings.workers

    values = [parse_sweep_value(args.parameter, raw) for raw in _split_values(args.values)]
    seeds = [int(raw) for raw in _split_values(args.seeds)]
    rows = run_sweep(config, args.parameter, values, seeds, workers)
    summary = summarise_sweep(rows)

    table_path = write_csv(out_dir / f"sweep_{args.parameter}.csv", SWEEP_COLUMNS, rows)
    summary_path = write_csv(
        out_dir / f"sweep_{args.parameter}_summary.csv",
        ("value", "seeds", "accuracy_mean", "accuracy_std", "reward_mean", "reward_std"),
        summary,
    )
    outcome = StageOutcome(
        stage=f"sweep:{args.parameter}",
        metrics={f"accuracy[{row['value']}]": row["accuracy_mean"] for row in summary},
        artifacts=[table_path, summary_path],
    )
    run_id = _record(settings, config, out_dir, outcome)

    print(f"Run ID: {run_id}")
    _print_sweep(args.parameter, summary)
    print(f"Sweep table: {table_path}")
    return 0


def cmd_runs_list(limit: int) -> int:
    settings = load_settings()
    _prepare(settings)

    with get_session(settings.db_url) as db:
        runs = list_runs(db, limit)

    if not runs:
        print("No runs found")
        return 0

    table = Table(title="Recent runs")
    for column in ("id", "created_at", "stage", "seed", "config", "out_dir"):
        table.add_column(column)
    for run in runs:
        table.add_row(str(run.id), str(run.created_at), run.stage, str(run.seed), run.config_hash[:12], run.out_dir)
    Console().print(table)
    return 0


def cmd_runs_show(run_id: int) -> int:
    settings = load_settings()
    _prepare(settings)

    with get_session(settings.db_url) as db:
        run = find_run(db, run_id)
        payload = run_to_dict(run) if run else None

    if payload is None:
        raise RuntimeError(f"Run not found: {run_id}")
    print(json.dumps(payload, indent=2, ensure_ascii=False))
    return 0


def cmd_templates_validate(template_path: Optional[Path]) -> int:
    settings = load_settings()
    _configure_logging(settings.log_level)

    path = template_path or builtin_template_dir() / REPORT_TEMPLATE
    validate_template(path)
    print(f"Template valid: {path}")
    return 0


def _add_experiment_arguments(parser: argparse.ArgumentParser, workers: bool = True) -> None:
    parser.add_argument("--config", required=False, help="Experiment config JSON (defaults when omitted)")
    parser.add_argument("--seed", type=int, required=False, help="Override the config's root seed")
    parser.add_argument("--out", required=False, help="Output directory (default: GLIMPSE_OUTPUT_DIR)")
    if workers:
        parser.add_argument("--workers", type=int, required=False, help="Episode-level worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glimpse", description="Object-grounded video reasoning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("init", help="Initialize the run ledger and runtime directories")

    config_parser = sub.add_parser("config", help="Experiment config operations")
    config_sub = config_parser.add_subparsers(dest="config_command", required=True)
    emit_parser = config_sub.add_parser("emit", help="Print or write the default config")
    emit_parser.add_argument("--out", required=False, help="Write to this file instead of stdout")
    check_parser = config_sub.add_parser("validate", help="Validate a config file")
    check_parser.add_argument("--config", required=True, help="Config file path")

    gen = sub.add_parser("gen", help="Generate the train and eval episode corpus")
    _add_experiment_arguments(gen, workers=False)

    run = sub.add_parser("run", help="Run one pipeline stage")
    run.add_argument("stage", choices=STAGES, help="Stage to run")
    _add_experiment_arguments(run)
    run.add_argument(
        "--policy",
        choices=EVAL_POLICIES,
        default="latest",
        help="Policy to evaluate (eval stage only; default: latest trained)",
    )

    sweep = sub.add_parser("sweep", help="Run the pipeline over parameter values and seeds")
    sweep.add_argument("--parameter", required=True, choices=sorted(SWEEP_PARAMETERS), help="Parameter to sweep")
    sweep.add_argument("--values", required=True, nargs="+", help="Values, space or comma separated")
    sweep.add_argument("--seeds", required=True, nargs="+", help="Root seeds, space or comma separated")
    _add_experiment_arguments(sweep)

    runs = sub.add_parser("runs", help="Run ledger operations")
    runs_sub = runs.add_subparsers(dest="runs_command", required=True)
    list_parser = runs_sub.add_parser("list", help="List recent runs")
    list_parser.add_argument("--limit", type=int, default=20, help="Max rows to return")
    show_parser = runs_sub.add_parser("show", help="Show run details")
    show_parser.add_argument("--id", type=int, required=True, help="Run ID")

    tmpl_parser = sub.add_parser("templates", help="Report template operations")
    tmpl_sub = tmpl_parser.add_subparsers(dest="templates_command", required=True)
    validate_parser = tmpl_sub.add_parser("validate", help="Validate a report template")
    validate_parser.add_argument("--template", required=False, help="Template path (default: bundled report)")

    return parser


def main(argv: List[str] | None = None) -> int:
    args_list = argv if argv is not None else sys.argv[1:]
    if not args_list:
        print("ERROR: no command provided. Use 'glimpse --help' for usage.", file=sys.stderr)
        return 1

    parser = build_parser()
    args = parser.parse_args(args_list)

    try:
        if args.command == "init":
            return cmd_init()

        if args.command == "config" and args.config_command == "emit":
            return cmd_config_emit(Path(args.out) if args.out else None)

        if args.command == "config" and args.config_command == "validate":
            return cmd_config_validate(Path(args.config))

        if args.command == "gen":
            return cmd_gen(args)

        if args.command == "run":
            return cmd_run(args)

        if args.command == "sweep":
            return cmd_sweep(args)

        if args.command == "runs" and args.runs_command == "list":
            return cmd_runs_list(args.limit)

        if args.command == "runs" and args.runs_command == "show":
            return cmd_runs_show(args.id)

        if args.command == "templates" and args.templates_command == "validate":
            return cmd_templates_validate(Path(args.template) if args.template else None)

        parser.print_help()
        return 1
    except Exception as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
