"""Post-hoc analysis of execution traces."""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .const import LayerSelector
from .cost_model import FlopsReport
from .errors import DataError, TraceError
from .network import ExecutionTrace

_LOGGER = logging.getLogger(__name__)

TRACE_FILE_VERSION = 1


@dataclass
class ActivationMatrix:
    """Per-class percentage of instances that activate each channel of one block.

    C-Net gates the first layer's output channels, which are also the channels
    the second layer reads; ``layer`` records which view the matrix is labelled
    with.
    """

    block_index: int
    layer: LayerSelector
    class_names: tuple[str, ...]
    channels: tuple[int, ...]
    percentages: np.ndarray
    instance_counts: tuple[int, ...]

    def write_csv(self, path: str | Path) -> Path:
        """Header of channel indices, one row per class name."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["class", *self.channels])
            for name, row in zip(self.class_names, self.percentages, strict=True):
                writer.writerow([name, *(repr(float(v)) for v in row)])
        return path

    @classmethod
    def read_csv(
        cls, path: str | Path, block_index: int, layer: LayerSelector
    ) -> ActivationMatrix:
        """Parse a file written by ``write_csv`` (instance counts are not stored)."""
        with Path(path).open(newline="") as handle:
            rows = list(csv.reader(handle))
        if not rows:
            raise TraceError(f"{path}: empty activation matrix")
        channels = tuple(int(c) for c in rows[0][1:])
        names = tuple(row[0] for row in rows[1:])
        values = np.array([[float(v) for v in row[1:]] for row in rows[1:]], dtype=np.float64)
        return cls(
            block_index=block_index,
            layer=layer,
            class_names=names,
            channels=channels,
            percentages=values.reshape(len(names), len(channels)),
            instance_counts=(),
        )


def channel_activation_matrix(
    traces: Sequence[ExecutionTrace],
    block_index: int,
    class_names: Sequence[str],
    layer: LayerSelector = LayerSelector.SECOND_LAYER_INPUT,
    labels: Sequence[int] | None = None,
    max_channels: int | None = None,
) -> ActivationMatrix:
    """Percentage of each class's instances with S_C^j > 0, per channel j.

    Raises:
        TraceError: If ``block_index`` is out of range or labels are misaligned
        DataError: If a class has no instances
    """
    if not traces:
        raise TraceError("No traces to analyse")
    blocks = len(traces[0].blocks)
    if not 0 <= block_index < blocks:
        raise TraceError(f"Block index {block_index} out of range [0, {blocks})")
    if labels is None:
        labels = [trace.label for trace in traces]
    if len(labels) != len(traces):
        raise TraceError(f"{len(labels)} labels for {len(traces)} traces")
    label_array = np.asarray(labels, dtype=np.int64)
    scores = np.stack([trace.channel_salience(block_index) for trace in traces])
    width = scores.shape[1] if max_channels is None else min(max_channels, scores.shape[1])
    active = scores[:, :width] > 0

    rows, counts = [], []
    for class_id, name in enumerate(class_names):
        members = label_array == class_id
        count = int(members.sum())
        if count == 0:
            raise DataError(f"Class {class_id} ({name}) has no instances")
        rows.append(100.0 * active[members].sum(axis=0) / count)
        counts.append(count)
    return ActivationMatrix(
        block_index=block_index,
        layer=layer,
        class_names=tuple(class_names),
        channels=tuple(range(width)),
        percentages=np.array(rows, dtype=np.float64).reshape(len(class_names), width),
        instance_counts=tuple(counts),
    )


@dataclass(frozen=True)
class RankedInstance:
    """One row of an extremes listing."""

    rank: int
    instance_id: int
    label: int
    flops: int


def extreme_instances(
    report: FlopsReport, k: int
) -> tuple[list[RankedInstance], list[RankedInstance]]:
    """Lowest-k and highest-k instances by FLOPs, ties broken by ascending id."""
    if not 0 < k <= len(report):
        raise ValueError(f"k must be in [1, {len(report)}], got {k}")
    ids, totals = report.instance_ids, report.totals
    ascending = np.lexsort((ids, totals))
    descending = np.lexsort((ids, -totals))

    def ranked(order: np.ndarray) -> list[RankedInstance]:
        return [
            RankedInstance(rank, int(ids[i]), int(report.labels[i]), int(totals[i]))
            for rank, i in enumerate(order[:k], start=1)
        ]

    return ranked(ascending), ranked(descending)


def write_extremes_csv(
    lowest: list[RankedInstance], highest: list[RankedInstance], path: str | Path
) -> Path:
    """Rows of (group, rank, instance id, label, flops)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["group", "rank", "instance_id", "label", "flops"])
        for group, rows in (("lowest", lowest), ("highest", highest)):
            for row in rows:
                writer.writerow([group, row.rank, row.instance_id, row.label, row.flops])
    return path


def block_execution_rates(traces: Sequence[ExecutionTrace]) -> list[float]:
    """Fraction of instances that execute each block."""
    if not traces:
        return []
    executed = np.array([[bool(entry.executed[0]) for entry in t.blocks] for t in traces])
    return [float(v) for v in executed.mean(axis=0)]


def channel_activation_rates(traces: Sequence[ExecutionTrace]) -> list[float]:
    """Mean fraction of active channels per block."""
    if not traces:
        return []
    rates = []
    for index, entry in enumerate(traces[0].blocks):
        width = entry.salience.channel_salience.shape[1]
        active = sum(int(t.blocks[index].active_channels[0]) for t in traces)
        rates.append(active / (width * len(traces)))
    return rates


def save_traces_json(
    traces: Sequence[ExecutionTrace], path: str | Path, metadata: dict[str, Any] | None = None
) -> Path:
    """Write full saliences of every instance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        "version": TRACE_FILE_VERSION,
        "metadata": metadata or {},
        "traces": [trace.to_dict() for trace in traces],
    }
    path.write_text(json.dumps(document, sort_keys=True))
    _LOGGER.info("Saved %d traces to %s", len(traces), path)
    return path


def load_traces_json(path: str | Path) -> tuple[list[ExecutionTrace], dict[str, Any]]:
    """Read traces written by ``save_traces_json``."""
    path = Path(path)
    if not path.is_file():
        raise TraceError(f"No trace file at {path}")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise TraceError(f"{path}: not a JSON document ({err})") from err
    if not isinstance(document, dict):
        raise TraceError(f"{path}: expected a JSON object, got {type(document).__name__}")
    if document.get("version") != TRACE_FILE_VERSION:
        raise TraceError(f"{path}: unsupported trace file version {document.get('version')}")
    items = document.get("traces")
    if not isinstance(items, list):
        raise TraceError(f"{path}: missing trace list")
    try:
        traces = [ExecutionTrace.from_dict(item) for item in items]
    except (AttributeError, KeyError, TypeError, ValueError) as err:
        raise TraceError(f"{path}: malformed trace entry ({err!r})") from err
    _LOGGER.debug("Loaded %d traces from %s", len(traces), path)
    return traces, document.get("metadata", {})


def write_traces_csv(traces: Sequence[ExecutionTrace], path: str | Path) -> Path:
    """Summary table: S_L and active-channel count of every block per instance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = len(traces[0].blocks) if traces else 0
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        header = ["instance_id", "label", "prediction"]
        for i in range(blocks):
            header += [f"block_{i}_salience", f"block_{i}_active_channels"]
        writer.writerow(header)
        for trace in traces:
            row: list[Any] = [trace.instance_id, trace.label, trace.prediction]
            for entry in trace.blocks:
                row += [
                    repr(float(entry.salience.block_salience.data[0])),
                    int(entry.active_channels[0]),
                ]
            writer.writerow(row)
    return path
