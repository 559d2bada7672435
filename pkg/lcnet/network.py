"""Network assembly: stem, gated residual blocks, pooling and classifier."""

from __future__ import annotations

import logging
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .blocks import (
    BlockSpec,
    BlockTraceEntry,
    block_forward_dense,
    block_forward_plain,
    block_forward_skipping,
    build_block,
    set_gate_constant,
)
from .config import ModelConfig
from .const import (
    DEFAULT_DTYPE,
    DEFAULT_LEAK,
    BlockKind,
    ExecutionMode,
    Placement,
)
from .errors import ShapeError, TraceError
from .gating import Relu1Mode, SalienceRecord, gate_l1_penalty
from .nn_ops import (
    BatchNormParams,
    Conv2dParams,
    FlopsCounter,
    LinearParams,
    batch_norm,
    batch_norm_eval_array,
    conv2d,
    conv2d_array,
    cross_entropy,
    global_avg_pool,
    global_avg_pool_array,
    init_batch_norm,
    init_conv2d,
    init_linear,
    linear,
    linear_array,
    relu,
    relu_array,
)
from .tensor import Tensor, add, no_grad

_LOGGER = logging.getLogger(__name__)

TAG_STEM = "stem"
TAG_CLASSIFIER = "classifier"


@dataclass
class NetworkSpec:
    """A gated residual network and the config it was built from."""

    config: ModelConfig
    stem: Conv2dParams
    stem_bn: BatchNormParams
    blocks: list[BlockSpec]
    classifier: LinearParams

    @property
    def num_classes(self) -> int:
        """Return the classifier's output size."""
        return self.classifier.out_features

    def validate(self) -> list[str]:
        """Check that adjacent parts fit together."""
        errors = self.stem.validate() + self.stem_bn.validate() + self.classifier.validate()
        width = self.stem.out_channels
        for index, block in enumerate(self.blocks):
            if block.in_channels != width:
                errors.append(
                    f"Block {index} expects {block.in_channels} channels, receives {width}"
                )
            errors.extend(f"Block {index}: {error}" for error in block.validate())
            width = block.out_channels
        if self.classifier.in_features != width:
            errors.append(
                f"Classifier expects {self.classifier.in_features} features, receives {width}"
            )
        if self.num_classes != self.config.num_classes:
            errors.append("Classifier size does not match the configured class count")
        return errors


def build_network(config: ModelConfig, rng: np.random.Generator | int = 0) -> NetworkSpec:
    """Create a freshly initialised network for ``config``.

    The stem is a 3×3 stride-1 convolution. Every stage after the first halves
    the spatial size in its first block. Bottleneck stages output
    ``width · expansion`` channels.
    """
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    stem_width = config.resolved_stem_width
    stem = init_conv2d(rng, config.in_channels, stem_width, 3, 1, 1, dtype=DEFAULT_DTYPE)
    blocks: list[BlockSpec] = []
    in_channels = stem_width
    for stage, (width, depth) in enumerate(
        zip(config.stage_widths, config.stage_depths, strict=True)
    ):
        out_channels = width
        if config.block_kind == BlockKind.BOTTLENECK:
            out_channels = width * config.expansion
        for position in range(depth):
            stride = 2 if stage > 0 and position == 0 else 1
            blocks.append(
                build_block(
                    rng, config.block_kind, in_channels, out_channels, stride, config.expansion
                )
            )
            in_channels = out_channels
    net = NetworkSpec(
        config=config,
        stem=stem,
        stem_bn=init_batch_norm(stem_width),
        blocks=blocks,
        classifier=init_linear(rng, in_channels, config.num_classes),
    )
    _LOGGER.debug(
        "Built %s network with %d gated blocks and %d classes",
        config.block_kind,
        len(blocks),
        config.num_classes,
    )
    return net


def _block_parameters(block: BlockSpec) -> Iterator[tuple[str, Tensor, bool]]:
    for i, (conv, bn) in enumerate(zip(block.convs, block.bns, strict=True)):
        yield f"convs.{i}.weight", conv.weight, False
        if conv.bias is not None:
            yield f"convs.{i}.bias", conv.bias, False
        yield f"bns.{i}.scale", bn.scale, False
        yield f"bns.{i}.shift", bn.shift, False
    if block.shortcut is not None and block.shortcut_bn is not None:
        yield "shortcut.weight", block.shortcut.weight, False
        yield "shortcut_bn.scale", block.shortcut_bn.scale, False
        yield "shortcut_bn.shift", block.shortcut_bn.shift, False
    yield "block_gate.weight", block.block_gate.fc.weight, True
    yield "block_gate.bias", block.block_gate.fc.bias, True
    yield "channel_gate.weight", block.channel_gate.fc.weight, True
    yield "channel_gate.bias", block.channel_gate.fc.bias, True


def _named(net: NetworkSpec) -> Iterator[tuple[str, Tensor, bool]]:
    yield "stem.weight", net.stem.weight, False
    if net.stem.bias is not None:
        yield "stem.bias", net.stem.bias, False
    yield "stem_bn.scale", net.stem_bn.scale, False
    yield "stem_bn.shift", net.stem_bn.shift, False
    for index, block in enumerate(net.blocks):
        for name, tensor, is_gate in _block_parameters(block):
            yield f"blocks.{index}.{name}", tensor, is_gate
    yield "classifier.weight", net.classifier.weight, False
    yield "classifier.bias", net.classifier.bias, False


def named_parameters(net: NetworkSpec) -> list[tuple[str, Tensor]]:
    """Return every trainable tensor with a stable dotted name."""
    return [(name, tensor) for name, tensor, _ in _named(net)]


def parameter_groups(net: NetworkSpec) -> dict[str, list[tuple[str, Tensor]]]:
    """Split parameters into the backbone and gate groups."""
    groups: dict[str, list[tuple[str, Tensor]]] = {"backbone": [], "gate": []}
    for name, tensor, is_gate in _named(net):
        groups["gate" if is_gate else "backbone"].append((name, tensor))
    return groups


def named_batch_norms(net: NetworkSpec) -> list[tuple[str, BatchNormParams]]:
    """Return every batch norm with the name prefix of its running statistics."""
    norms = [("stem_bn", net.stem_bn)]
    for index, block in enumerate(net.blocks):
        norms.extend((f"blocks.{index}.bns.{i}", bn) for i, bn in enumerate(block.bns))
        if block.shortcut_bn is not None:
            norms.append((f"blocks.{index}.shortcut_bn", block.shortcut_bn))
    return norms


def state_arrays(net: NetworkSpec) -> dict[str, np.ndarray]:
    """Return parameters and running statistics in a stable order."""
    arrays = {name: tensor.data for name, tensor in named_parameters(net)}
    for prefix, bn in named_batch_norms(net):
        arrays[f"{prefix}.running_mean"] = bn.running_mean
        arrays[f"{prefix}.running_var"] = bn.running_var
    return arrays


def load_state_arrays(net: NetworkSpec, arrays: dict[str, np.ndarray]) -> None:
    """Replace every parameter and running statistic with the given arrays.

    Raises:
        ShapeError: If an array does not match the tensor it replaces
        KeyError: If an entry is missing
    """
    for name, tensor in named_parameters(net):
        value = arrays[name]
        if value.shape != tensor.shape:
            raise ShapeError(name, tensor.shape, value.shape)
        tensor.data = np.ascontiguousarray(value, dtype=tensor.dtype)
        tensor.grad = None
    for prefix, bn in named_batch_norms(net):
        for attr in ("running_mean", "running_var"):
            value = arrays[f"{prefix}.{attr}"]
            current = getattr(bn, attr)
            if value.shape != current.shape:
                raise ShapeError(f"{prefix}.{attr}", current.shape, value.shape)
            setattr(bn, attr, np.array(value, dtype=current.dtype))


def set_gates_constant(
    net: NetworkSpec, block_value: float = 1.0, channel_value: float = 1.0
) -> None:
    """Force every gate to a constant salience (1 = fully on, -1 = fully off)."""
    for block in net.blocks:
        set_gate_constant(block.block_gate, block_value)
        set_gate_constant(block.channel_gate, channel_value)


def _check_input(x: Tensor, net: NetworkSpec) -> None:
    if x.ndim != 4 or x.shape[1] != net.stem.in_channels:
        raise ShapeError("network", x.shape, (net.stem.in_channels,), detail="channel mismatch")


def _merge_entries(entries: list[BlockTraceEntry]) -> BlockTraceEntry:
    record = SalienceRecord(
        block_salience=Tensor(np.concatenate([e.salience.block_salience.data for e in entries])),
        channel_salience=Tensor(
            np.concatenate([e.salience.channel_salience.data for e in entries])
        ),
    )
    first = entries[0]
    return BlockTraceEntry.from_salience(first.block_index, record, first.input_hw)


def _forward_skipping(
    x: Tensor,
    net: NetworkSpec,
    placement: Placement,
    counter: FlopsCounter | None,
) -> tuple[Tensor, list[BlockTraceEntry]]:
    logits = []
    per_block: list[list[BlockTraceEntry]] = [[] for _ in net.blocks]
    bn = net.stem_bn
    with no_grad():
        for index in range(x.shape[0]):
            h = conv2d_array(
                x.data[index : index + 1],
                net.stem.weight.data,
                None if net.stem.bias is None else net.stem.bias.data,
                net.stem.stride,
                net.stem.padding,
                counter,
                TAG_STEM,
            )
            h = batch_norm_eval_array(
                h,
                bn.scale.data,
                bn.shift.data,
                bn.running_mean,
                bn.running_var,
                bn.epsilon,
                counter,
                TAG_STEM,
            )
            state = Tensor(relu_array(h, counter, TAG_STEM))
            for block_index, block in enumerate(net.blocks):
                state, entry = block_forward_skipping(
                    state, block, placement, counter, block_index
                )
                per_block[block_index].append(entry)
            pooled = global_avg_pool_array(state.data, counter, TAG_CLASSIFIER)
            logits.append(
                linear_array(
                    pooled,
                    net.classifier.weight.data,
                    net.classifier.bias.data,
                    counter,
                    TAG_CLASSIFIER,
                )
            )
    out = Tensor(np.concatenate(logits) if logits else np.zeros((0, net.num_classes)))
    return out, [_merge_entries(entries) for entries in per_block if entries]


def network_forward(
    x: Tensor,
    net: NetworkSpec,
    mode: ExecutionMode = ExecutionMode.EVAL_DENSE,
    gated: bool = True,
    leak: float = DEFAULT_LEAK,
    placement: Placement = Placement.SEQUENTIAL,
    counter: FlopsCounter | None = None,
) -> tuple[Tensor, list[BlockTraceEntry]]:
    """Run the network and collect one trace entry per gated block.

    Args:
        x: Input batch (N, C, H, W)
        net: Network to run
        mode: ``train`` (dense, leaky ReLU-1, batch statistics), ``eval-dense``
            (dense, standard ReLU-1, running statistics) or ``eval-skipping``
            (per-instance structural skipping)
        gated: Run the plain residual blocks instead when False
        leak: ReLU-1 leak used in ``train`` mode
        placement: Gate placement for the skipping executor
        counter: FLOPs tally filled by the skipping executor

    Returns:
        Logits (N, classes) and the trace entries (empty when ungated)
    """
    _check_input(x, net)
    if mode == ExecutionMode.EVAL_SKIPPING:
        if not gated:
            raise ValueError("Structural skipping needs the gates")
        return _forward_skipping(x, net, placement, counter)

    training = mode == ExecutionMode.TRAIN
    relu1_mode = Relu1Mode.training(leak) if training else Relu1Mode.inference()
    h = relu(batch_norm(conv2d(x, net.stem), net.stem_bn, training))
    traces: list[BlockTraceEntry] = []
    for index, block in enumerate(net.blocks):
        if gated:
            h, entry = block_forward_dense(h, block, relu1_mode, training, index)
            traces.append(entry)
        else:
            h = block_forward_plain(h, block, training)
    logits = linear(global_avg_pool(h), net.classifier)
    logits.assert_finite("logits")
    return logits, traces


def total_loss(
    logits: Tensor, labels: np.ndarray, traces: list[BlockTraceEntry], lam: float
) -> Tensor:
    """Mean cross-entropy plus the L1 penalty on every gate output."""
    loss = cross_entropy(logits, labels)
    if lam == 0 or not traces:
        return loss
    return add(loss, gate_l1_penalty([entry.salience for entry in traces], lam))


def top_k_accuracy(logits: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    """Fraction of instances whose label is among the k highest logits."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    k = min(k, logits.shape[1])
    ranked = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(ranked == labels[:, None], axis=1)))


def predictions(logits: np.ndarray) -> np.ndarray:
    """Arg-max class per instance."""
    return np.argmax(logits, axis=1).astype(np.int64)


@dataclass
class ExecutionTrace:
    """Salience decisions of one instance through every gated block."""

    instance_id: int
    label: int
    prediction: int
    blocks: list[BlockTraceEntry] = field(default_factory=list)

    def block_salience(self, block_index: int) -> float:
        """Return S_L of one block."""
        return float(self.blocks[block_index].salience.block_salience.data[0])

    def channel_salience(self, block_index: int) -> np.ndarray:
        """Return S_C of one block."""
        return self.blocks[block_index].salience.channel_salience.data[0]

    def check_against(self, net: NetworkSpec) -> None:
        """Raise TraceError unless the trace describes ``net``."""
        if len(self.blocks) != len(net.blocks):
            raise TraceError(
                f"Instance {self.instance_id}: trace covers {len(self.blocks)} blocks, "
                f"network has {len(net.blocks)}"
            )
        for entry, block in zip(self.blocks, net.blocks, strict=True):
            entry.check_against(block)

    def to_dict(self) -> dict[str, Any]:
        """Convert to a JSON-ready dictionary with full saliences."""
        return {
            "instance_id": self.instance_id,
            "label": self.label,
            "prediction": self.prediction,
            "blocks": [
                {
                    "block_index": entry.block_index,
                    "input_hw": list(entry.input_hw),
                    "block_salience": float(entry.salience.block_salience.data[0]),
                    "channel_salience": [
                        float(v) for v in entry.salience.channel_salience.data[0]
                    ],
                }
                for entry in self.blocks
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExecutionTrace:
        """Create from dictionary."""
        blocks = []
        for item in data.get("blocks", []):
            record = SalienceRecord(
                block_salience=Tensor(np.array([item["block_salience"]], dtype=DEFAULT_DTYPE)),
                channel_salience=Tensor(
                    np.array([item["channel_salience"]], dtype=DEFAULT_DTYPE)
                ),
            )
            blocks.append(
                BlockTraceEntry.from_salience(
                    item["block_index"], record, tuple(item["input_hw"])
                )
            )
        return cls(
            instance_id=data["instance_id"],
            label=data["label"],
            prediction=data["prediction"],
            blocks=blocks,
        )


def trace_instances(
    net: NetworkSpec,
    images: np.ndarray,
    labels: np.ndarray,
    mode: ExecutionMode = ExecutionMode.EVAL_SKIPPING,
    batch_size: int = 100,
    first_id: int = 0,
) -> list[ExecutionTrace]:
    """Run inference and keep one ExecutionTrace per instance."""
    if mode == ExecutionMode.TRAIN:
        raise ValueError("Traces are recorded in an eval mode")
    traces: list[ExecutionTrace] = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            stop = min(start + batch_size, len(images))
            logits, entries = network_forward(Tensor(images[start:stop]), net, mode)
            predicted = predictions(logits.data)
            for offset in range(stop - start):
                traces.append(
                    ExecutionTrace(
                        instance_id=first_id + start + offset,
                        label=int(labels[start + offset]),
                        prediction=int(predicted[offset]),
                        blocks=[entry.instance(offset) for entry in entries],
                    )
                )
    _LOGGER.debug("Traced %d instances in %s mode", len(traces), mode)
    return traces
