"""Command-line entry point: train, fine-tune, evaluate, trace and report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

from . import __version__
from .analytics import (
    block_execution_rates,
    channel_activation_matrix,
    channel_activation_rates,
    extreme_instances,
    load_traces_json,
    save_traces_json,
    write_extremes_csv,
    write_traces_csv,
)
from .checkpoint import Checkpoint, load_checkpoint
from .config import RunConfig
from .const import (
    CHECKPOINT_BEST,
    CHECKPOINT_FINAL,
    CONF_CHECKPOINT,
    CONF_EPOCHS,
    CONF_EVAL,
    CONF_L1_LAMBDA,
    CONF_MODE,
    CONF_OUTPUT_DIR,
    CONF_PLACEMENT,
    CONF_PRETRAINED,
    CONF_RECIPE,
    CONF_SEED,
    CONF_TRAIN,
    EXIT_CONFIG_ERROR,
    EXIT_DATA_ERROR,
    EXIT_FAILURE,
    EXIT_NUMERIC_ERROR,
    EXIT_OK,
    EXTREMES_CSV,
    METRICS_CSV,
    RESOLVED_CONFIG_JSON,
    SUMMARY_JSON,
    TRACES_CSV,
    TRACES_JSON,
    Command,
    ExecutionMode,
    Placement,
    TrainMode,
)
from .cost_model import CostConfig, dataset_flops_report
from .data import Dataset, load_datasets
from .diagnostics import network_summary
from .errors import CheckpointError, DataError, LCNetError, NumericError
from .network import ExecutionTrace, build_network, trace_instances
from .trainer import Trainer, evaluate, write_metrics_csv
from .validation import (
    ValidationError,
    apply_overrides,
    build_run_config,
    load_config_file,
)

_LOGGER = logging.getLogger(__name__)


def _write_json(path: Path, data: dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _emit(data: dict[str, Any]) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def _flops_csv_name(placement: Placement) -> str:
    return f"flops_{placement}.csv"


def _test_split(config: RunConfig, checkpoint: Checkpoint) -> Dataset:
    _, test = load_datasets(config.data, config.train.seed, checkpoint.stats)
    if config.eval.max_instances is not None:
        test = test.subset(config.eval.max_instances)
    if len(test) == 0:
        raise DataError("The test split is empty")
    return test


def _trace(config: RunConfig, checkpoint: Checkpoint) -> tuple[list[ExecutionTrace], Dataset]:
    test = _test_split(config, checkpoint)
    traces = trace_instances(
        checkpoint.net, test.images, test.labels, ExecutionMode.EVAL_SKIPPING
    )
    return traces, test


def _fit(config: RunConfig, trainer: Trainer) -> dict[str, Any]:
    output_dir = Path(config.output_dir)
    metrics = trainer.fit()
    write_metrics_csv(metrics, output_dir / METRICS_CSV)
    summary = {
        "best_epoch": trainer.best_epoch,
        "best_test_accuracy": trainer.best_accuracy,
        "final_test_accuracy": metrics[-1].test_accuracy,
        "final_gate_sparsity": metrics[-1].gate_sparsity,
        "checkpoints": {
            CHECKPOINT_BEST: str(output_dir / CHECKPOINT_BEST),
            CHECKPOINT_FINAL: str(output_dir / CHECKPOINT_FINAL),
        },
        "network": network_summary(trainer.net, trainer.train_data.images.shape[2:]),
    }
    _write_json(output_dir / SUMMARY_JSON, summary)
    return summary


def cmd_train(config: RunConfig) -> int:
    """Train a gated network from scratch."""
    train, test = load_datasets(config.data, config.train.seed)
    net = build_network(config.model, config.train.seed)
    trainer = Trainer(
        net,
        train,
        test,
        config.train,
        augment_crop=config.data.augment_crop,
        augment_flip=config.data.augment_flip,
        output_dir=config.output_dir,
        stats=train.stats,
    )
    summary = _fit(config, trainer)
    _emit({key: summary[key] for key in ("best_epoch", "best_test_accuracy")})
    return EXIT_OK


def cmd_finetune(config: RunConfig) -> int:
    """Continue training a pretrained network with the L1 gate penalty."""
    assert config.train.pretrained is not None
    pretrained = load_checkpoint(config.train.pretrained)
    train, test = load_datasets(config.data, config.train.seed, pretrained.stats)
    trainer = Trainer(
        pretrained.net,
        train,
        test,
        config.train,
        augment_crop=config.data.augment_crop,
        augment_flip=config.data.augment_flip,
        output_dir=config.output_dir,
        stats=train.stats,
    )
    summary = _fit(config, trainer)
    _emit({key: summary[key] for key in ("best_epoch", "best_test_accuracy")})
    return EXIT_OK


def cmd_eval(config: RunConfig) -> int:
    """Accuracy and per-instance FLOPs under every gate placement."""
    assert config.checkpoint is not None
    checkpoint = load_checkpoint(config.checkpoint)
    traces, test = _trace(config, checkpoint)
    dense = evaluate(checkpoint.net, test, mode=ExecutionMode.EVAL_DENSE)
    skipped = sum(int(t.prediction == t.label) for t in traces) / len(traces)

    output_dir = Path(config.output_dir)
    placements = {}
    for placement in Placement:
        cfg = CostConfig(placement=placement, count_gate_flops=config.eval.count_gate_flops)
        report = dataset_flops_report(traces, checkpoint.net, cfg, config.eval.histogram_bins)
        report.write_csv(output_dir / _flops_csv_name(placement))
        placements[str(placement)] = report.summary()

    summary = {
        "instances": len(test),
        "dense_top1": dense.top1,
        "dense_top5": dense.top5,
        "skipping_top1": skipped,
        "gate_sparsity": dense.gates.gate_sparsity,
        "block_execution_rates": block_execution_rates(traces),
        "channel_activation_rates": channel_activation_rates(traces),
        "flops": placements,
    }
    _write_json(output_dir / SUMMARY_JSON, summary)
    _emit(summary)
    return EXIT_OK


def cmd_trace(config: RunConfig) -> int:
    """Record one execution trace per test instance."""
    assert config.checkpoint is not None
    checkpoint = load_checkpoint(config.checkpoint)
    traces, test = _trace(config, checkpoint)
    output_dir = Path(config.output_dir)
    save_traces_json(
        traces,
        output_dir / TRACES_JSON,
        metadata={"class_names": list(test.class_names), CONF_CHECKPOINT: config.checkpoint},
    )
    write_traces_csv(traces, output_dir / TRACES_CSV)
    _emit({"traces": len(traces), "output": str(output_dir / TRACES_JSON)})
    return EXIT_OK


def _load_traces(config: RunConfig, path: str | None) -> tuple[list[ExecutionTrace], dict]:
    traces_path = Path(path) if path else Path(config.output_dir) / TRACES_JSON
    return load_traces_json(traces_path)


def cmd_flops_report(config: RunConfig, traces_path: str | None = None) -> int:
    """Cost saved traces under the configured placement and list the extremes."""
    assert config.checkpoint is not None
    checkpoint = load_checkpoint(config.checkpoint)
    traces, _ = _load_traces(config, traces_path)
    cfg = CostConfig(
        placement=config.eval.placement, count_gate_flops=config.eval.count_gate_flops
    )
    report = dataset_flops_report(traces, checkpoint.net, cfg, config.eval.histogram_bins)
    output_dir = Path(config.output_dir)
    report.write_csv(output_dir / _flops_csv_name(cfg.placement))
    k = min(config.eval.extremes_k, len(report))
    lowest, highest = extreme_instances(report, k)
    write_extremes_csv(lowest, highest, output_dir / EXTREMES_CSV)
    counts, edges = report.histogram()
    summary = {
        **report.summary(),
        "histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
    }
    _emit(summary)
    return EXIT_OK


def cmd_activation_matrix(config: RunConfig, traces_path: str | None = None) -> int:
    """Per-class channel activation percentages of one block."""
    traces, metadata = _load_traces(config, traces_path)
    class_names = metadata.get("class_names")
    if not class_names:
        raise DataError("Trace file carries no class names")
    matrix = channel_activation_matrix(
        traces,
        config.eval.block_index,
        class_names,
        layer=config.eval.layer,
        max_channels=config.eval.max_channels,
    )
    path = matrix.write_csv(
        Path(config.output_dir) / f"activation_block{matrix.block_index}_{matrix.layer}.csv"
    )
    _emit({"block_index": matrix.block_index, "layer": str(matrix.layer), "output": str(path)})
    return EXIT_OK


def cmd_print_config(config: RunConfig) -> int:
    """Print the fully resolved configuration."""
    _emit(config.to_dict())
    return EXIT_OK


def build_arg_parser() -> argparse.ArgumentParser:
    """Create the argument parser with one subcommand per command."""
    parser = argparse.ArgumentParser(
        prog="lcnet", description="Conditional-computation CNNs with block and channel gates."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log debug detail")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Log warnings only")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value (JSON-decoded); repeatable",
    )
    common.add_argument("--recipe", help="Training recipe preset")
    common.add_argument("--seed", type=int, help="Random seed")
    common.add_argument("--epochs", type=int, help="Number of training epochs")
    common.add_argument("--lambda", dest="l1_lambda", type=float, help="L1 gate penalty weight")
    common.add_argument("--checkpoint", help="Checkpoint directory to read")
    common.add_argument("--placement", help="Gate placement for cost accounting")
    common.add_argument("--output-dir", help="Directory for artifacts")

    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in Command:
        sub = subparsers.add_parser(str(command), parents=[common], help=_HANDLERS[command][1])
        if command in (Command.FLOPS_REPORT, Command.ACTIVATION_MATRIX):
            sub.add_argument("--traces", help="Trace JSON written by the trace command")
        if command == Command.FINETUNE:
            sub.add_argument("--pretrained", help="Checkpoint to fine-tune")
    return parser


def _raw_config(args: argparse.Namespace, command: Command) -> dict[str, Any]:
    raw = load_config_file(args.config) if args.config else {}
    overrides = list(args.overrides)
    for key, value in (
        (f"{CONF_TRAIN}.{CONF_SEED}", args.seed),
        (f"{CONF_TRAIN}.{CONF_EPOCHS}", args.epochs),
        (f"{CONF_TRAIN}.{CONF_L1_LAMBDA}", args.l1_lambda),
        (CONF_CHECKPOINT, args.checkpoint),
        (CONF_OUTPUT_DIR, args.output_dir),
        (CONF_RECIPE, args.recipe),
        (f"{CONF_EVAL}.{CONF_PLACEMENT}", args.placement),
    ):
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    if command == Command.FINETUNE:
        overrides.append(f"{CONF_TRAIN}.{CONF_MODE}={json.dumps(str(TrainMode.FINE_TUNE))}")
        pretrained = getattr(args, "pretrained", None) or args.checkpoint
        if pretrained:
            overrides.append(f"{CONF_TRAIN}.{CONF_PRETRAINED}={json.dumps(pretrained)}")
    return apply_overrides(raw, overrides)


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _dispatch(command: Command, config: RunConfig, args: argparse.Namespace) -> int:
    if command in (Command.FLOPS_REPORT, Command.ACTIVATION_MATRIX):
        handler = _HANDLERS[command][0]
        return handler(config, args.traces)
    return _HANDLERS[command][0](config)


def main(argv: Sequence[str] | None = None) -> int:
    """Run one command and return its exit code."""
    args = build_arg_parser().parse_args(argv)
    _configure_logging(args)
    command = Command(args.command)
    try:
        config = build_run_config(_raw_config(args, command), command)
        _LOGGER.info("Running %s with recipe %s", command, config.recipe)
        if command != Command.PRINT_CONFIG:
            _write_json(Path(config.output_dir) / RESOLVED_CONFIG_JSON, config.to_dict())
        return _dispatch(command, config, args)
    except ValidationError as err:
        _LOGGER.error("Invalid configuration: %s", err)
        return EXIT_CONFIG_ERROR
    except (DataError, CheckpointError) as err:
        _LOGGER.error("%s", err)
        return EXIT_DATA_ERROR
    except NumericError as err:
        _LOGGER.error("Numeric failure: %s", err)
        return EXIT_NUMERIC_ERROR
    except LCNetError as err:
        _LOGGER.error("Command %s failed: %s", command, err)
        return EXIT_FAILURE
    except ValueError as err:
        _LOGGER.error("Invalid configuration: %s", err)
        return EXIT_CONFIG_ERROR


_HANDLERS: dict[Command, tuple[Callable[..., int], str]] = {
    Command.TRAIN: (cmd_train, "Train a gated network from scratch"),
    Command.FINETUNE: (cmd_finetune, "Fine-tune a pretrained network with the L1 gate penalty"),
    Command.EVAL: (cmd_eval, "Accuracy and FLOPs under every gate placement"),
    Command.TRACE: (cmd_trace, "Record per-instance execution traces"),
    Command.FLOPS_REPORT: (cmd_flops_report, "Per-instance FLOPs and extremes from traces"),
    Command.ACTIVATION_MATRIX: (cmd_activation_matrix, "Per-class channel activation matrix"),
    Command.PRINT_CONFIG: (cmd_print_config, "Print the resolved configuration"),
}
