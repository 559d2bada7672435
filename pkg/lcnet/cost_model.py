"""Analytical FLOPs accounting for dense, parallel and sequential gate placement.

Conventions: one multiply-accumulate is ``flops_per_mac`` FLOPs and a bias adds
one FLOP per output element; inference batch norm costs 2 FLOPs per element;
ReLU, ReLU-1 and pooling cost 1 FLOP per (input) element. Salience scaling and
the residual addition are not charged.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import BlockSpec, BlockTraceEntry
from .const import (
    BN_FLOPS_PER_ELEMENT,
    DEFAULT_HISTOGRAM_BINS,
    FLOPS_PER_MAC,
    POOL_FLOPS_PER_ELEMENT,
    RELU_FLOPS_PER_ELEMENT,
    BlockKind,
    Placement,
)
from .errors import TraceError
from .gating import SalienceRecord
from .network import ExecutionTrace, NetworkSpec
from .nn_ops import Conv2dParams, conv_output_hw
from .tensor import Tensor

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostConfig:
    """Gate placement and counting conventions."""

    placement: Placement = Placement.SEQUENTIAL
    flops_per_mac: int = FLOPS_PER_MAC
    count_gate_flops: bool = True

    @property
    def charges_gates(self) -> bool:
        """Return True when gate networks are part of the bill."""
        return self.count_gate_flops and self.placement != Placement.DENSE


def conv_flops(
    in_channels: int,
    out_channels: int,
    kernel: tuple[int, int],
    out_hw: tuple[int, int],
    active_in: int | None = None,
    active_out: int | None = None,
    bias: bool = False,
    flops_per_mac: int = FLOPS_PER_MAC,
) -> int:
    """FLOPs of one convolution over one instance with some channels inactive."""
    active_in = in_channels if active_in is None else active_in
    active_out = out_channels if active_out is None else active_out
    if not (0 <= active_in <= in_channels and 0 <= active_out <= out_channels):
        raise ValueError(
            f"Active channels ({active_in}, {active_out}) exceed ({in_channels}, {out_channels})"
        )
    outputs = active_out * out_hw[0] * out_hw[1]
    macs = active_in * kernel[0] * kernel[1] * outputs
    return flops_per_mac * macs + (outputs if bias else 0)


def bn_flops(channels: int, hw: tuple[int, int]) -> int:
    """Inference batch norm over ``channels`` maps of size ``hw``."""
    return BN_FLOPS_PER_ELEMENT * channels * hw[0] * hw[1]


def relu_flops(channels: int, hw: tuple[int, int]) -> int:
    """ReLU over ``channels`` maps of size ``hw``."""
    return RELU_FLOPS_PER_ELEMENT * channels * hw[0] * hw[1]


def linear_flops(in_features: int, out_features: int, flops_per_mac: int = FLOPS_PER_MAC) -> int:
    """Fully-connected layer with bias."""
    return flops_per_mac * in_features * out_features + out_features


def _conv(
    conv: Conv2dParams,
    in_hw: tuple[int, int],
    cfg: CostConfig,
    active_in: int | None = None,
    active_out: int | None = None,
) -> tuple[int, tuple[int, int]]:
    out_hw = conv_output_hw(in_hw[0], in_hw[1], conv.kernel_size, conv.stride, conv.padding)
    flops = conv_flops(
        conv.in_channels,
        conv.out_channels,
        conv.kernel_size,
        out_hw,
        active_in,
        active_out,
        conv.bias is not None,
        cfg.flops_per_mac,
    )
    return flops, out_hw


def gate_flops(spec: BlockSpec, input_hw: tuple[int, int], cfg: CostConfig | None = None) -> int:
    """Shared pooling, both gate FC layers and their ReLU-1."""
    cfg = cfg or CostConfig()
    pooled = POOL_FLOPS_PER_ELEMENT * spec.in_channels * input_hw[0] * input_hw[1]
    block = linear_flops(spec.in_channels, spec.block_gate.out_features, cfg.flops_per_mac)
    channel = linear_flops(spec.in_channels, spec.channel_gate.out_features, cfg.flops_per_mac)
    activations = RELU_FLOPS_PER_ELEMENT * (
        spec.block_gate.out_features + spec.channel_gate.out_features
    )
    return pooled + block + channel + activations


@dataclass(frozen=True)
class BlockCost:
    """Cost of one block for one instance."""

    backbone: int
    gate: int

    @property
    def total(self) -> int:
        """Return backbone plus gate FLOPs."""
        return self.backbone + self.gate


def _shortcut_flops(spec: BlockSpec, input_hw: tuple[int, int], cfg: CostConfig) -> int:
    if spec.shortcut is None:
        return 0
    flops, out_hw = _conv(spec.shortcut, input_hw, cfg)
    return flops + bn_flops(spec.out_channels, out_hw)


def _first_layer_flops(
    spec: BlockSpec, input_hw: tuple[int, int], cfg: CostConfig, active_out: int
) -> tuple[int, tuple[int, int]]:
    flops, out_hw = _conv(spec.convs[0], input_hw, cfg, active_out=active_out)
    return flops + bn_flops(active_out, out_hw) + relu_flops(active_out, out_hw), out_hw


def _later_layers_flops(
    spec: BlockSpec, hw: tuple[int, int], cfg: CostConfig, active_in: int
) -> int:
    flops, hw = _conv(spec.convs[1], hw, cfg, active_in=active_in)
    flops += bn_flops(spec.convs[1].out_channels, hw)
    if spec.kind == BlockKind.BOTTLENECK:
        flops += relu_flops(spec.convs[1].out_channels, hw)
        conv3, hw = _conv(spec.convs[2], hw, cfg)
        flops += conv3 + bn_flops(spec.convs[2].out_channels, hw)
    return flops


def block_cost(
    entry: BlockTraceEntry, spec: BlockSpec, cfg: CostConfig, index: int = 0
) -> BlockCost:
    """Cost of instance ``index`` of ``entry`` under ``cfg.placement``.

    * dense: every layer at nominal width, gates not charged.
    * parallel: the full first layer is always paid; later layers pay only the
      active input channels, and nothing when S_L = 0.
    * sequential: nothing of the branch when S_L = 0; otherwise the first layer
      pays only its active output channels and later layers the active inputs.

    The projection shortcut is always paid; gates are paid by parallel and
    sequential placement when ``cfg.count_gate_flops`` is set.
    """
    entry.check_against(spec)
    input_hw = entry.input_hw
    executed = bool(entry.executed[index])
    active = int(entry.active_channels[index])
    nominal = spec.gated_channels

    backbone = _shortcut_flops(spec, input_hw, cfg)
    if cfg.placement == Placement.DENSE:
        first, hw = _first_layer_flops(spec, input_hw, cfg, nominal)
        backbone += first + _later_layers_flops(spec, hw, cfg, nominal)
    elif cfg.placement == Placement.PARALLEL:
        first, hw = _first_layer_flops(spec, input_hw, cfg, nominal)
        backbone += first
        if executed:
            backbone += _later_layers_flops(spec, hw, cfg, active)
    elif executed:
        first, hw = _first_layer_flops(spec, input_hw, cfg, active)
        backbone += first + _later_layers_flops(spec, hw, cfg, active)
    gate = gate_flops(spec, input_hw, cfg) if cfg.charges_gates else 0
    return BlockCost(backbone=backbone, gate=gate)


def block_flops(entry: BlockTraceEntry, spec: BlockSpec, cfg: CostConfig, index: int = 0) -> int:
    """Total FLOPs of one block for one instance, gates included when charged."""
    return block_cost(entry, spec, cfg, index).total


def stem_flops(net: NetworkSpec, stem_out_hw: tuple[int, int], cfg: CostConfig) -> int:
    """Stem convolution, batch norm and ReLU for one instance."""
    stem = net.stem
    flops = conv_flops(
        stem.in_channels,
        stem.out_channels,
        stem.kernel_size,
        stem_out_hw,
        bias=stem.bias is not None,
        flops_per_mac=cfg.flops_per_mac,
    )
    flops += bn_flops(stem.out_channels, stem_out_hw)
    return flops + relu_flops(stem.out_channels, stem_out_hw)


def classifier_flops(net: NetworkSpec, final_hw: tuple[int, int], cfg: CostConfig) -> int:
    """Global pooling and the classifier for one instance."""
    channels = net.classifier.in_features
    pooled = POOL_FLOPS_PER_ELEMENT * channels * final_hw[0] * final_hw[1]
    return pooled + linear_flops(channels, net.classifier.out_features, cfg.flops_per_mac)


@dataclass(frozen=True)
class InstanceCost:
    """Breakdown of one instance's FLOPs."""

    stem: int
    blocks: tuple[int, ...]
    gate: int
    classifier: int

    @property
    def total(self) -> int:
        """Return stem + blocks + gates + classifier."""
        return self.stem + sum(self.blocks) + self.gate + self.classifier


def instance_cost(trace: ExecutionTrace, net: NetworkSpec, cfg: CostConfig) -> InstanceCost:
    """Cost of one traced instance through the whole network."""
    trace.check_against(net)
    costs = [
        block_cost(entry, spec, cfg) for entry, spec in zip(trace.blocks, net.blocks, strict=True)
    ]
    final_hw = net.blocks[-1].output_hw(trace.blocks[-1].input_hw) if net.blocks else (1, 1)
    stem_hw = trace.blocks[0].input_hw if trace.blocks else final_hw
    return InstanceCost(
        stem=stem_flops(net, stem_hw, cfg),
        blocks=tuple(cost.backbone for cost in costs),
        gate=sum(cost.gate for cost in costs),
        classifier=classifier_flops(net, final_hw, cfg),
    )


def all_on_trace(net: NetworkSpec, image_hw: tuple[int, int]) -> ExecutionTrace:
    """A trace with every gate fully open, for nominal cost figures."""

    entries = []
    stem = net.stem
    hw = conv_output_hw(image_hw[0], image_hw[1], stem.kernel_size, stem.stride, stem.padding)
    for index, spec in enumerate(net.blocks):
        record = SalienceRecord(
            Tensor(np.ones(1, dtype=np.float32)),
            Tensor(np.ones((1, spec.gated_channels), dtype=np.float32)),
        )
        entries.append(BlockTraceEntry.from_salience(index, record, hw))
        hw = spec.output_hw(hw)
    return ExecutionTrace(instance_id=0, label=0, prediction=0, blocks=entries)


@dataclass
class FlopsReport:
    """Per-instance FLOPs of a traced dataset under one placement.

    ``per_block`` holds backbone FLOPs per block; gate FLOPs are kept in their
    own column so that total = stem + Σ blocks + gate + classifier.
    """

    placement: Placement
    instance_ids: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray
    per_block: np.ndarray
    stem: np.ndarray
    gate: np.ndarray
    classifier: np.ndarray
    histogram_bins: int = DEFAULT_HISTOGRAM_BINS
    totals: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        """Derive per-instance totals."""
        self.totals = (
            self.stem + self.per_block.sum(axis=1) + self.gate + self.classifier
        ).astype(np.int64)

    def __len__(self) -> int:
        """Return the number of instances."""
        return len(self.instance_ids)

    @property
    def mean(self) -> float:
        """Return the mean per-instance FLOPs."""
        return float(self.totals.mean())

    @property
    def min(self) -> int:
        """Return the cheapest instance's FLOPs."""
        return int(self.totals.min())

    @property
    def max(self) -> int:
        """Return the most expensive instance's FLOPs."""
        return int(self.totals.max())

    def histogram(self) -> tuple[np.ndarray, np.ndarray]:
        """Counts and bin edges of the per-instance totals."""
        return np.histogram(self.totals, bins=self.histogram_bins)

    def summary(self) -> dict[str, float | int | str]:
        """Aggregates for logs and JSON summaries."""
        return {
            "placement": str(self.placement),
            "instances": len(self),
            "mean_flops": self.mean,
            "min_flops": self.min,
            "max_flops": self.max,
            "mean_gate_flops": float(self.gate.mean()),
        }

    def write_csv(self, path: str | Path) -> Path:
        """One row per instance: ids, labels, total and per-block columns."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blocks = self.per_block.shape[1]
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(
                ["instance_id", "label", "prediction", "total_flops", "stem", "gate", "classifier"]
                + [f"block_{i}" for i in range(blocks)]
            )
            for row in range(len(self)):
                writer.writerow(
                    [
                        int(self.instance_ids[row]),
                        int(self.labels[row]),
                        int(self.predictions[row]),
                        int(self.totals[row]),
                        int(self.stem[row]),
                        int(self.gate[row]),
                        int(self.classifier[row]),
                    ]
                    + [int(v) for v in self.per_block[row]]
                )
        return path

    @classmethod
    def read_csv(
        cls, path: str | Path, placement: Placement, histogram_bins: int = DEFAULT_HISTOGRAM_BINS
    ) -> FlopsReport:
        """Parse a file written by ``write_csv``."""
        with Path(path).open(newline="") as handle:
            rows = list(csv.reader(handle))
        if not rows:
            raise TraceError(f"{path}: empty FLOPs report")
        header, body = rows[0], rows[1:]
        blocks = sum(1 for name in header if name.startswith("block_"))
        table = np.array(body, dtype=np.int64).reshape(len(body), len(header))
        report = cls(
            placement=placement,
            instance_ids=table[:, 0],
            labels=table[:, 1],
            predictions=table[:, 2],
            stem=table[:, 4],
            gate=table[:, 5],
            classifier=table[:, 6],
            per_block=table[:, 7 : 7 + blocks],
            histogram_bins=histogram_bins,
        )
        if not np.array_equal(report.totals, table[:, 3]):
            raise TraceError(f"{path}: total column disagrees with its parts")
        return report


def dataset_flops_report(
    traces: Sequence[ExecutionTrace],
    net: NetworkSpec,
    cfg: CostConfig,
    histogram_bins: int = DEFAULT_HISTOGRAM_BINS,
) -> FlopsReport:
    """Cost every traced instance under ``cfg``.

    Raises:
        TraceError: If there are no traces or a trace does not match ``net``
    """
    if not traces:
        raise TraceError("Cannot build a FLOPs report from an empty trace set")
    costs = [instance_cost(trace, net, cfg) for trace in traces]
    report = FlopsReport(
        placement=cfg.placement,
        instance_ids=np.array([t.instance_id for t in traces], dtype=np.int64),
        labels=np.array([t.label for t in traces], dtype=np.int64),
        predictions=np.array([t.prediction for t in traces], dtype=np.int64),
        per_block=np.array([c.blocks for c in costs], dtype=np.int64).reshape(
            len(costs), len(net.blocks)
        ),
        stem=np.array([c.stem for c in costs], dtype=np.int64),
        gate=np.array([c.gate for c in costs], dtype=np.int64),
        classifier=np.array([c.classifier for c in costs], dtype=np.int64),
        histogram_bins=histogram_bins,
    )
    _LOGGER.debug(
        "%s FLOPs over %d instances: mean %.0f, min %d, max %d",
        cfg.placement,
        len(report),
        report.mean,
        report.min,
        report.max,
    )
    return report
