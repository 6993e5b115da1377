"""
Command-line entry point for the TempoFit retrofit harness.

Subcommands: alias, ablate, bench, trace. Every run writes a CSV table, a JSON
report and the resolved configuration into the output directory.
"""

import argparse
import logging
import os
from pathlib import Path
import sys
import typing

from dotenv import find_dotenv, load_dotenv
import orjson

from src.backbone import BackboneWeights, backbone_init
from src.config import Configuration, ConfigurationState
from src.harness import (
    ABLATION_COLUMNS,
    ALIASING_COLUMNS,
    BENCH_COLUMNS,
    AblationGrid,
    bench_efficiency,
    gen_aliasing_task,
    gen_task_suite,
    layer_subset,
    report_header,
    run_ablation,
    run_aliasing_experiment,
    trace_dump,
    trace_stream,
    write_csv,
    write_report,
)
from src.logging import log_exception, setup_logging
from src.storages import JSONFileStorage
from src.types import (
    ConfigError,
    InjectionMode,
    RetrievalMode,
    TempoFitError,
)

load_dotenv(
    find_dotenv(str(Path.cwd() / ".env"), raise_error_if_not_found=False),
    encoding="utf-8",
)

logger = logging.getLogger(__name__)  # type: ignore[attr-defined]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON configuration file")
    common.add_argument("--seed", type=int, help="Harness seed override")
    common.add_argument(
        "--out", type=Path, default=Path("reports"), help="Output directory"
    )
    common.add_argument("--capacity", type=int, help="Memory capacity C override")
    common.add_argument("--beta", type=float, help="Temporal bias strength override")
    common.add_argument(
        "--layers",
        help="Memory layers: comma separated indices, or all/top/bottom/intermediate",
    )
    common.add_argument(
        "--mode",
        help=(
            "Retrieval mode (k_to_k, q_to_k), injection mode "
            "(residual_norm, residual_plain, concatenate) or 'off'"
        ),
    )

    parser = argparse.ArgumentParser(
        prog="tempofit", description="Temporal memory retrofit harness"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser(
        "alias", parents=[common], help="State-aliasing divergence experiment"
    )
    commands.add_parser("ablate", parents=[common], help="One-change ablation grid")
    commands.add_parser("bench", parents=[common], help="Per-step efficiency benchmark")
    commands.add_parser("trace", parents=[common], help="Retrieval weight trace")
    return parser


def _parse_layers(value: str, num_layers: int) -> typing.Tuple[int, ...]:
    if value.strip().isalpha():
        return layer_subset(value.strip(), num_layers)
    try:
        return tuple(int(part) for part in value.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"Invalid --layers value {value!r}") from None


def _mode_override(value: str) -> typing.Dict[str, typing.Any]:
    if value == "off":
        return {"enabled": False}
    if value in {mode.value for mode in RetrievalMode}:
        return {"retrieval_mode": RetrievalMode(value)}
    if value in {mode.value for mode in InjectionMode}:
        return {"injection_mode": InjectionMode(value)}
    raise ConfigError(f"Unknown --mode value {value!r}")


def resolve_configuration(args: argparse.Namespace) -> Configuration:
    """Load the configuration file, if any, and apply command-line overrides."""
    if args.config is not None:
        config = Configuration.from_file(args.config)
    else:
        config = Configuration("tempofit", state=ConfigurationState())

    tempofit: typing.Dict[str, typing.Any] = {}
    if args.capacity is not None:
        tempofit["capacity"] = args.capacity
    if args.beta is not None:
        tempofit["beta"] = args.beta
    if args.layers is not None:
        tempofit["mem_layers"] = _parse_layers(
            args.layers, config.state.backbone.num_layers
        )
    if args.mode is not None:
        tempofit.update(_mode_override(args.mode))
    if tempofit:
        config.update("tempofit", **tempofit)
    if args.seed is not None:
        config.update("harness", seed=args.seed)

    # Validate layer and slope choices against the backbone up front
    config.state.tempofit.resolve_layers(config.state.backbone.num_layers)
    config.state.tempofit.resolve_fgtb(config.state.backbone)
    return config


def _task_suite(state: ConfigurationState):
    backbone, harness = state.backbone, state.harness
    return gen_task_suite(
        harness.seed,
        harness.num_tasks,
        harness.episode_length,
        harness.alias_step,
        backbone.prefix_tokens,
        backbone.model_dim,
        batch_size=harness.batch_size,
        differing_step=harness.differing_step,
    )


def run_alias(
    state: ConfigurationState, weights: BackboneWeights, out: Path, storage: JSONFileStorage
) -> typing.Dict[str, str]:
    reports = [
        run_aliasing_experiment(task, weights, state.tempofit)
        for task in _task_suite(state)
    ]
    rows = [report.as_row() for report in reports]
    csv_path = write_csv(out / "alias.csv", ALIASING_COLUMNS, rows)
    document = {
        **report_header("alias", state),
        "weights_fingerprint": weights.fingerprint(),
        "tasks": rows,
        "disambiguated": sum(report.disambiguated for report in reports),
    }
    json_path = write_report(storage, "alias", document)
    return {"csv": str(csv_path), "json": str(json_path)}


def run_ablate(
    state: ConfigurationState, weights: BackboneWeights, out: Path, storage: JSONFileStorage
) -> typing.Dict[str, str]:
    grid = AblationGrid.one_change(
        state.tempofit, state.backbone.num_layers, state.harness.capacities
    )
    rows = [
        row.as_row()
        for row in run_ablation(
            grid, _task_suite(state), weights, workers=state.harness.workers
        )
    ]
    csv_path = write_csv(out / "ablation.csv", ABLATION_COLUMNS, rows)
    document = {
        **report_header("ablate", state),
        "weights_fingerprint": weights.fingerprint(),
        "cells": rows,
    }
    json_path = write_report(storage, "ablate", document)
    return {"csv": str(csv_path), "json": str(json_path)}


def run_bench(
    state: ConfigurationState, weights: BackboneWeights, out: Path, storage: JSONFileStorage
) -> typing.Dict[str, str]:
    harness = state.harness
    report = bench_efficiency(
        weights,
        state.tempofit,
        harness.capacities,
        harness.stack_sizes,
        harness.repetitions,
        warmup=harness.warmup,
        batch_size=harness.batch_size,
        seed=harness.seed,
    )
    csv_path = write_csv(out / "bench.csv", BENCH_COLUMNS, report.rows())
    document = {
        **report_header("bench", state),
        "weights_fingerprint": weights.fingerprint(),
        "entries": report.deterministic_rows(),
        "timing": report.timing(),
    }
    json_path = write_report(storage, "bench", document)
    return {"csv": str(csv_path), "json": str(json_path)}


def run_trace(
    state: ConfigurationState, weights: BackboneWeights, out: Path, storage: JSONFileStorage
) -> typing.Dict[str, str]:
    backbone, harness = state.backbone, state.harness
    task = gen_aliasing_task(
        harness.seed,
        harness.episode_length,
        harness.alias_step,
        backbone.prefix_tokens,
        backbone.model_dim,
        batch_size=harness.batch_size,
        differing_step=harness.differing_step,
    )
    rows = trace_stream(weights, state.tempofit, task.obs_a, name="trace")
    csv_path = trace_dump(rows, out / "trace.csv")
    document = {
        **report_header("trace", state),
        "weights_fingerprint": weights.fingerprint(),
        "rows": len(rows),
        "steps": sorted({row.t for row in rows}),
        "layers": sorted({row.layer for row in rows}),
    }
    json_path = write_report(storage, "trace", document)
    return {"csv": str(csv_path), "json": str(json_path)}


COMMANDS = {
    "alias": run_alias,
    "ablate": run_ablate,
    "bench": run_bench,
    "trace": run_trace,
}


def emit_error(exc: BaseException) -> None:
    """Write a machine-readable error document to stderr."""
    payload = {
        "error": {
            "code": getattr(exc, "code", "unexpected_error"),
            "type": type(exc).__name__,
            "message": str(exc),
        }
    }
    sys.stderr.write(orjson.dumps(payload).decode() + "\n")


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(
        log_file=os.getenv("LOG_FILE") or None,
        base_level=os.getenv("LOG_LEVEL", "INFO"),
        format="%(asctime)s - [%(name)s:%(funcName)s:%(lineno)d] - %(levelname)s - %(message)s",
    )

    try:
        config = resolve_configuration(args)
        state = config.state
        out: Path = args.out
        storage = JSONFileStorage(out, namespace="report")
        Configuration(
            args.command,
            storages=[JSONFileStorage(out, namespace="config")],
            state=state,
        ).save()

        weights = backbone_init(state.backbone)
        logger.info(
            f"Running {args.command!r} on backbone {weights.fingerprint()[:12]} "
            f"(L={state.backbone.num_layers}, H={state.backbone.num_heads}, "
            f"d={state.backbone.head_dim}, S={state.backbone.prefix_tokens})"
        )
        paths = COMMANDS[args.command](state, weights, out, storage)
    except ConfigError as exc:
        logger.error(f"Configuration error: {exc}")
        emit_error(exc)
        return EXIT_CONFIG
    except TempoFitError as exc:
        log_exception(exc, f"{args.command} failed", logger=logger)
        emit_error(exc)
        return EXIT_FAILURE
    except Exception as exc:
        log_exception(exc, f"Unexpected failure in {args.command}", logger=logger)
        emit_error(exc)
        return EXIT_FAILURE

    sys.stdout.write(orjson.dumps(paths, option=orjson.OPT_SORT_KEYS).decode() + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
