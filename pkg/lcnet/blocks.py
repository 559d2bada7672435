"""Residual blocks augmented with block and channel gates.

Two executors share one parameter set:

* ``block_forward_dense`` multiplies the first layer's output by S_C and the
  residual branch by S_L. It is batched and differentiable, and it is the only
  path used for training.
* ``block_forward_skipping`` runs one instance in inference mode and computes
  only the convolutions whose channels carry a non-zero salience. It can tally
  the FLOPs of what it executes into a ``FlopsCounter``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .const import DEFAULT_BOTTLENECK_EXPANSION, DEFAULT_DTYPE, BlockKind, GateKind, Placement
from .errors import ShapeError, TraceError
from .gating import (
    GateNet,
    Relu1Mode,
    SalienceRecord,
    init_gate_net,
    predict_salience,
    predict_salience_array,
)
from .nn_ops import (
    BatchNormParams,
    Conv2dParams,
    FlopsCounter,
    batch_norm,
    batch_norm_eval_array,
    conv2d,
    conv2d_array,
    conv_output_hw,
    init_batch_norm,
    init_conv2d,
    relu,
    relu_array,
)
from .tensor import Tensor, add, broadcast_mul

_LOGGER = logging.getLogger(__name__)

TAG_FIRST_LAYER = "first_layer"
TAG_LATER_LAYERS = "later_layers"
TAG_SHORTCUT = "shortcut"


@dataclass
class BlockSpec:
    """A residual block with its gates.

    Basic blocks hold two 3×3 convolutions, bottleneck blocks 1×1, 3×3, 1×1.
    Each convolution is followed by its batch norm; a projection shortcut
    (1×1 convolution + batch norm) is present exactly when the block changes
    stride or width.
    """

    kind: BlockKind
    in_channels: int
    out_channels: int
    stride: int
    convs: list[Conv2dParams]
    bns: list[BatchNormParams]
    block_gate: GateNet
    channel_gate: GateNet
    shortcut: Conv2dParams | None = None
    shortcut_bn: BatchNormParams | None = None

    @property
    def has_projection_shortcut(self) -> bool:
        """Return True when the shortcut is a projection."""
        return self.shortcut is not None

    @property
    def gated_channels(self) -> int:
        """Return the first layer's output channel count."""
        return self.convs[0].out_channels

    def validate(self) -> list[str]:
        """Validate the block and return a list of errors."""
        errors: list[str] = []
        expected_convs = 2 if self.kind == BlockKind.BASIC else 3
        if len(self.convs) != expected_convs or len(self.bns) != expected_convs:
            errors.append(
                f"{self.kind} block needs {expected_convs} conv/bn pairs, "
                f"got {len(self.convs)}/{len(self.bns)}"
            )
            return errors
        needs_projection = self.stride != 1 or self.in_channels != self.out_channels
        if needs_projection != self.has_projection_shortcut:
            errors.append(
                f"Projection shortcut must be present iff stride != 1 or width changes "
                f"(stride {self.stride}, {self.in_channels}->{self.out_channels})"
            )
        if self.has_projection_shortcut and self.shortcut_bn is None:
            errors.append("Projection shortcut is missing its batch norm")
        if self.convs[0].in_channels != self.in_channels:
            errors.append("First conv input channels do not match the block input")
        if self.convs[-1].out_channels != self.out_channels:
            errors.append("Last conv output channels do not match the block output")
        for conv, bn in zip(self.convs, self.bns, strict=True):
            errors.extend(conv.validate())
            errors.extend(bn.validate())
            if bn.channels != conv.out_channels:
                errors.append(f"Batch norm width {bn.channels} != conv width {conv.out_channels}")
        errors.extend(self.block_gate.validate())
        errors.extend(self.channel_gate.validate(self.gated_channels))
        if self.block_gate.in_features != self.in_channels:
            errors.append("Block gate input size does not match the block input")
        if self.channel_gate.in_features != self.in_channels:
            errors.append("Channel gate input size does not match the block input")
        return errors

    def output_hw(self, input_hw: tuple[int, int]) -> tuple[int, int]:
        """Return the block's output spatial size."""
        h, w = input_hw
        for conv in self.convs:
            h, w = conv_output_hw(h, w, conv.kernel_size, conv.stride, conv.padding)
        return h, w


def build_block(
    rng: np.random.Generator,
    kind: BlockKind,
    in_channels: int,
    out_channels: int,
    stride: int = 1,
    expansion: int = DEFAULT_BOTTLENECK_EXPANSION,
    dtype: str = DEFAULT_DTYPE,
) -> BlockSpec:
    """Create a freshly initialised gated block."""
    if kind == BlockKind.BASIC:
        convs = [
            init_conv2d(rng, in_channels, out_channels, 3, stride, 1, dtype=dtype),
            init_conv2d(rng, out_channels, out_channels, 3, 1, 1, dtype=dtype),
        ]
    else:
        if out_channels % expansion:
            raise ValueError(f"Bottleneck width {out_channels} is not divisible by {expansion}")
        mid = out_channels // expansion
        convs = [
            init_conv2d(rng, in_channels, mid, 1, 1, 0, dtype=dtype),
            init_conv2d(rng, mid, mid, 3, stride, 1, dtype=dtype),
            init_conv2d(rng, mid, out_channels, 1, 1, 0, dtype=dtype),
        ]
    shortcut = shortcut_bn = None
    if stride != 1 or in_channels != out_channels:
        shortcut = init_conv2d(rng, in_channels, out_channels, 1, stride, 0, dtype=dtype)
        shortcut_bn = init_batch_norm(out_channels, dtype)
    return BlockSpec(
        kind=kind,
        in_channels=in_channels,
        out_channels=out_channels,
        stride=stride,
        convs=convs,
        bns=[init_batch_norm(conv.out_channels, dtype) for conv in convs],
        block_gate=init_gate_net(rng, in_channels, 1, GateKind.BLOCK, dtype),
        channel_gate=init_gate_net(
            rng, in_channels, convs[0].out_channels, GateKind.CHANNEL, dtype
        ),
        shortcut=shortcut,
        shortcut_bn=shortcut_bn,
    )


def set_gate_constant(gate: GateNet, value: float) -> None:
    """Make a gate input-independent: zero weights, every bias set to ``value``."""
    gate.fc.weight.data = np.zeros_like(gate.fc.weight.data)
    gate.fc.bias.data = np.full_like(gate.fc.bias.data, value)


@dataclass
class BlockTraceEntry:
    """Salience decisions of one block for a batch of instances."""

    block_index: int
    salience: SalienceRecord
    input_hw: tuple[int, int]
    executed: np.ndarray
    active_channels: np.ndarray

    @classmethod
    def from_salience(
        cls, block_index: int, salience: SalienceRecord, input_hw: tuple[int, int]
    ) -> BlockTraceEntry:
        """Derive the skip decisions from raw saliences."""
        return cls(
            block_index=block_index,
            salience=salience,
            input_hw=(int(input_hw[0]), int(input_hw[1])),
            executed=salience.block_salience.data > 0,
            active_channels=(salience.channel_salience.data > 0).sum(axis=1).astype(np.int64),
        )

    @property
    def batch_size(self) -> int:
        """Return the number of instances covered."""
        return self.salience.batch_size

    def instance(self, index: int) -> BlockTraceEntry:
        """Return the detached entry of one instance."""
        return BlockTraceEntry.from_salience(
            self.block_index, self.salience.instance(index), self.input_hw
        )

    def detach(self) -> BlockTraceEntry:
        """Return a copy whose saliences are cut from the tape."""
        record = SalienceRecord(
            block_salience=self.salience.block_salience.detach(),
            channel_salience=self.salience.channel_salience.detach(),
        )
        return BlockTraceEntry.from_salience(self.block_index, record, self.input_hw)

    def verify(self) -> list[str]:
        """Recompute decisions from raw saliences and report disagreements."""
        fresh = BlockTraceEntry.from_salience(self.block_index, self.salience, self.input_hw)
        errors = []
        if not np.array_equal(fresh.executed, self.executed):
            errors.append(f"Block {self.block_index}: executed flags disagree with S_L")
        if not np.array_equal(fresh.active_channels, self.active_channels):
            errors.append(f"Block {self.block_index}: active-channel counts disagree with S_C")
        return errors

    def check_against(self, spec: BlockSpec) -> None:
        """Raise TraceError if the entry cannot describe ``spec``."""
        width = self.salience.channel_salience.shape[1]
        if width != spec.gated_channels:
            raise TraceError(
                f"Block {self.block_index}: trace has {width} channel scores, "
                f"block gates {spec.gated_channels} channels"
            )


def _check_input(x: Tensor, block: BlockSpec) -> None:
    if x.ndim != 4 or x.shape[1] != block.in_channels:
        raise ShapeError("block", x.shape, (block.in_channels,), detail="channel mismatch")


def _shortcut(x: Tensor, block: BlockSpec, training: bool) -> Tensor:
    if block.shortcut is None or block.shortcut_bn is None:
        return x
    return batch_norm(conv2d(x, block.shortcut), block.shortcut_bn, training)


def _branch_after_first_layer(h: Tensor, block: BlockSpec, training: bool) -> Tensor:
    if block.kind == BlockKind.BASIC:
        return batch_norm(conv2d(h, block.convs[1]), block.bns[1], training)
    h = relu(batch_norm(conv2d(h, block.convs[1]), block.bns[1], training))
    return batch_norm(conv2d(h, block.convs[2]), block.bns[2], training)


def block_forward_plain(x: Tensor, block: BlockSpec, training: bool = False) -> Tensor:
    """Ungated residual block: F(x) + shortcut(x)."""
    _check_input(x, block)
    h = relu(batch_norm(conv2d(x, block.convs[0]), block.bns[0], training))
    return add(_branch_after_first_layer(h, block, training), _shortcut(x, block, training))


def block_forward_dense(
    x: Tensor,
    block: BlockSpec,
    mode: Relu1Mode,
    training: bool = False,
    block_index: int = 0,
) -> tuple[Tensor, BlockTraceEntry]:
    """Gated block with dense multiplication by the saliences.

    S_C scales the first layer's output after its batch norm and ReLU, S_L scales
    the residual branch after its final batch norm, and the shortcut is added
    unscaled.
    """
    _check_input(x, block)
    salience = predict_salience(x, block.block_gate, block.channel_gate, mode)
    h = relu(batch_norm(conv2d(x, block.convs[0]), block.bns[0], training))
    h = broadcast_mul(h, salience.channel_salience)
    branch = broadcast_mul(_branch_after_first_layer(h, block, training), salience.block_salience)
    out = add(branch, _shortcut(x, block, training))
    out.assert_finite(f"block {block_index} output")
    entry = BlockTraceEntry.from_salience(block_index, salience, (x.shape[2], x.shape[3]))
    return out, entry


def _conv_bn(
    x: np.ndarray,
    conv: Conv2dParams,
    bn: BatchNormParams,
    out_channels: np.ndarray | slice,
    in_channels: np.ndarray | slice,
    counter: FlopsCounter | None,
    tag: str,
) -> np.ndarray:
    weight = conv.weight.data[out_channels][:, in_channels]
    bias = None if conv.bias is None else conv.bias.data[out_channels]
    h = conv2d_array(x, weight, bias, conv.stride, conv.padding, counter, tag)
    return batch_norm_eval_array(
        h,
        bn.scale.data[out_channels],
        bn.shift.data[out_channels],
        bn.running_mean[out_channels],
        bn.running_var[out_channels],
        bn.epsilon,
        counter,
        tag,
    )


def block_forward_skipping(
    x: Tensor,
    block: BlockSpec,
    placement: Placement = Placement.SEQUENTIAL,
    counter: FlopsCounter | None = None,
    block_index: int = 0,
) -> tuple[Tensor, BlockTraceEntry]:
    """Execute one instance structurally, skipping zero-salience work.

    ``placement`` decides what is run: ``sequential`` computes only the active
    output channels of the first layer and nothing of the branch when S_L = 0;
    ``parallel`` always computes the full first layer and then drops inactive
    channels; ``dense`` computes every layer at nominal width. All placements
    produce the same output up to float reassociation.
    """
    _check_input(x, block)
    if x.shape[0] != 1:
        raise ShapeError("block_forward_skipping", x.shape, detail="expects a batch of one")
    data = x.data
    block_scores, channel_scores = predict_salience_array(
        data, block.block_gate, block.channel_gate, Relu1Mode.inference(), counter
    )
    entry = BlockTraceEntry.from_salience(
        block_index,
        SalienceRecord(Tensor(block_scores), Tensor(channel_scores)),
        (x.shape[2], x.shape[3]),
    )

    shortcut = data
    if block.shortcut is not None and block.shortcut_bn is not None:
        everything = slice(None)
        shortcut = _conv_bn(
            data, block.shortcut, block.shortcut_bn, everything, everything, counter, TAG_SHORTCUT
        )

    s_l = block_scores[0]
    s_c = channel_scores[0]
    executed = s_l > 0
    if not executed and placement == Placement.SEQUENTIAL:
        return Tensor(shortcut), entry

    first, first_bn = block.convs[0], block.bns[0]
    everything = slice(None)
    active = np.flatnonzero(s_c > 0)
    if placement == Placement.SEQUENTIAL:
        if active.size:
            h = _conv_bn(data, first, first_bn, active, everything, counter, TAG_FIRST_LAYER)
            h = relu_array(h, counter, TAG_FIRST_LAYER)
        else:
            out_h, out_w = conv_output_hw(
                data.shape[2], data.shape[3], first.kernel_size, first.stride, first.padding
            )
            h = np.zeros((1, 0, out_h, out_w), dtype=data.dtype)
    else:
        h = _conv_bn(data, first, first_bn, everything, everything, counter, TAG_FIRST_LAYER)
        h = relu_array(h, counter, TAG_FIRST_LAYER)
        if placement == Placement.PARALLEL:
            if not executed:
                return Tensor(shortcut), entry
            h = h[:, active]

    if placement == Placement.DENSE:
        inputs: np.ndarray | slice = everything
        h = h * s_c.reshape(1, -1, 1, 1)
    else:
        inputs = active
        h = h * s_c[active].reshape(1, -1, 1, 1)
    if active.size == 0:
        _LOGGER.debug("Block %d: every channel gated off, later layers see a zero map", block_index)

    h = _conv_bn(h, block.convs[1], block.bns[1], everything, inputs, counter, TAG_LATER_LAYERS)
    if block.kind == BlockKind.BOTTLENECK:
        h = relu_array(h, counter, TAG_LATER_LAYERS)
        h = _conv_bn(
            h, block.convs[2], block.bns[2], everything, everything, counter, TAG_LATER_LAYERS
        )
    out = shortcut + h * s_l
    if not np.isfinite(out).all():
        Tensor(out).assert_finite(f"block {block_index} output")
    return Tensor(out), entry
