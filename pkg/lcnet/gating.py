"""ReLU-1 activation and the L-Net/C-Net salience predictors."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .const import (
    DEFAULT_DTYPE,
    DEFAULT_LEAK,
    GATE_INIT_BIAS,
    GATE_INIT_STD,
    RELU_FLOPS_PER_ELEMENT,
    GateKind,
    Relu1Kind,
)
from .errors import ShapeError
from .nn_ops import (
    FlopsCounter,
    LinearParams,
    global_avg_pool,
    global_avg_pool_array,
    linear,
    linear_array,
)
from .tensor import Function, Tensor, abs_, add, mul, reshape, sum_all

_LOGGER = logging.getLogger(__name__)

TAG_GATE = "gate"


@dataclass(frozen=True)
class Relu1Mode:
    """ReLU-1 variant and its leak slope outside [0, 1]."""

    kind: Relu1Kind
    leak: float = 0.0

    def __post_init__(self) -> None:
        """Reject inconsistent modes."""
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        """Validate the mode and return a list of errors."""
        errors = []
        if self.leak < 0:
            errors.append(f"Leak must be non-negative, got {self.leak}")
        if self.kind == Relu1Kind.INFERENCE_STANDARD and self.leak != 0:
            errors.append("Inference-standard ReLU-1 must have leak 0")
        return errors

    @classmethod
    def training(cls, leak: float = DEFAULT_LEAK) -> Relu1Mode:
        """Leaky ReLU-1 used while training."""
        return cls(Relu1Kind.TRAINING_LEAKY, leak)

    @classmethod
    def inference(cls) -> Relu1Mode:
        """Standard ReLU-1 used at inference."""
        return cls(Relu1Kind.INFERENCE_STANDARD, 0.0)

    @property
    def is_inference(self) -> bool:
        """Return True for the clamping variant."""
        return self.kind == Relu1Kind.INFERENCE_STANDARD


def relu1_array(
    x: np.ndarray, leak: float = 0.0, counter: FlopsCounter | None = None, tag: str = "relu1"
) -> np.ndarray:
    """Piecewise ReLU-1 on a raw array.

    leak·x for x ≤ 0, x on (0, 1], 1 + leak·(x − 1) above 1. With leak 0 this is
    the clamp to [0, 1] and non-positive inputs map to an exact (positive) zero.
    """
    if counter is not None:
        counter.add(tag, RELU_FLOPS_PER_ELEMENT * x.size)
    out = np.where(x <= 0, leak * x, np.where(x <= 1, x, 1 + leak * (x - 1)))
    # -0.0 from leak·x would otherwise leak into traces and CSV exports
    return (out + 0.0).astype(x.dtype, copy=False)


class _Relu1(Function):
    op = "relu1"

    def forward(self, x: np.ndarray, leak: float = 0.0) -> np.ndarray:
        inside = (x > 0) & (x <= 1)
        self.saved["slope"] = np.where(inside, 1.0, leak).astype(x.dtype)
        return relu1_array(x, leak)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.saved["slope"],)


def relu1(x: Tensor, mode: Relu1Mode) -> Tensor:
    """ReLU-1 in the given mode."""
    return _Relu1.apply(x, leak=mode.leak)


@dataclass
class GateNet:
    """Fully-connected salience predictor on top of a pooled block input."""

    fc: LinearParams
    kind: GateKind

    @property
    def in_features(self) -> int:
        """Return the host block's input channel count."""
        return self.fc.in_features

    @property
    def out_features(self) -> int:
        """Return the number of salience scores produced per instance."""
        return self.fc.out_features

    def validate(self, gated_channels: int | None = None) -> list[str]:
        """Validate the gate against the channel count it controls."""
        errors = self.fc.validate()
        if self.kind == GateKind.BLOCK and self.out_features != 1:
            errors.append(f"Block gate must have exactly 1 output, got {self.out_features}")
        if (
            self.kind == GateKind.CHANNEL
            and gated_channels is not None
            and self.out_features != gated_channels
        ):
            errors.append(
                f"Channel gate has {self.out_features} outputs for {gated_channels} channels"
            )
        return errors


def init_gate_net(
    rng: np.random.Generator,
    in_features: int,
    out_features: int,
    kind: GateKind,
    dtype: str = DEFAULT_DTYPE,
) -> GateNet:
    """Create a gate that starts fully open (saliences close to 1)."""
    if kind == GateKind.BLOCK and out_features != 1:
        raise ValueError(f"Block gate must have exactly 1 output, got {out_features}")
    weight = (rng.standard_normal((out_features, in_features)) * GATE_INIT_STD).astype(dtype)
    bias = np.full(out_features, GATE_INIT_BIAS, dtype=dtype)
    fc = LinearParams(
        weight=Tensor(weight, requires_grad=True), bias=Tensor(bias, requires_grad=True)
    )
    return GateNet(fc=fc, kind=kind)


@dataclass
class SalienceRecord:
    """Gate outputs for a batch: S_L of shape (N,) and S_C of shape (N, C)."""

    block_salience: Tensor
    channel_salience: Tensor

    @property
    def batch_size(self) -> int:
        """Return the number of instances covered."""
        return self.block_salience.shape[0]

    def instance(self, index: int) -> SalienceRecord:
        """Return the detached record of one instance."""
        return SalienceRecord(
            block_salience=Tensor(self.block_salience.data[index : index + 1].copy()),
            channel_salience=Tensor(self.channel_salience.data[index : index + 1].copy()),
        )

    def in_unit_range(self) -> bool:
        """Return True when every score lies in [0, 1]."""
        values = (self.block_salience.data, self.channel_salience.data)
        return all(bool(np.all((v >= 0) & (v <= 1))) for v in values)


def _check_gate(x: Tensor, gate: GateNet, kind: GateKind) -> None:
    if gate.kind != kind:
        raise ValueError(f"Expected a {kind} gate, got {gate.kind}")
    if x.ndim != 4 or x.shape[1] != gate.in_features:
        raise ShapeError(str(kind), x.shape, gate.fc.weight.shape, detail="channel mismatch")


def gate_forward(pooled: Tensor, gate: GateNet, mode: Relu1Mode) -> Tensor:
    """ReLU-1(FC(pooled)) on an already pooled (N, C) input."""
    return relu1(linear(pooled, gate.fc), mode)


def lnet_forward(x: Tensor, gate: GateNet, mode: Relu1Mode) -> Tensor:
    """Block salience S_L, one score per instance."""
    _check_gate(x, gate, GateKind.BLOCK)
    scores = gate_forward(global_avg_pool(x), gate, mode)
    return reshape(scores, (x.shape[0],))


def cnet_forward(x: Tensor, gate: GateNet, mode: Relu1Mode) -> Tensor:
    """Channel salience S_C, one vector per instance."""
    _check_gate(x, gate, GateKind.CHANNEL)
    return gate_forward(global_avg_pool(x), gate, mode)


def predict_salience(
    x: Tensor, block_gate: GateNet, channel_gate: GateNet, mode: Relu1Mode
) -> SalienceRecord:
    """Run both gates of a block from one shared pooled vector."""
    _check_gate(x, block_gate, GateKind.BLOCK)
    _check_gate(x, channel_gate, GateKind.CHANNEL)
    pooled = global_avg_pool(x)
    block = reshape(gate_forward(pooled, block_gate, mode), (x.shape[0],))
    channel = gate_forward(pooled, channel_gate, mode)
    return SalienceRecord(block_salience=block, channel_salience=channel)


def predict_salience_array(
    x: np.ndarray,
    block_gate: GateNet,
    channel_gate: GateNet,
    mode: Relu1Mode,
    counter: FlopsCounter | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw-array counterpart of ``predict_salience`` used by the skipping executor."""
    pooled = global_avg_pool_array(x, counter, tag=TAG_GATE)
    block = linear_array(
        pooled, block_gate.fc.weight.data, block_gate.fc.bias.data, counter, TAG_GATE
    )
    channel = linear_array(
        pooled, channel_gate.fc.weight.data, channel_gate.fc.bias.data, counter, TAG_GATE
    )
    block = relu1_array(block, mode.leak, counter, TAG_GATE).reshape(x.shape[0])
    return block, relu1_array(channel, mode.leak, counter, TAG_GATE)


def gate_l1_penalty(records: Sequence[SalienceRecord], lam: float) -> Tensor:
    """lam · (Σ|S_L| + Σ|S_C|) over every record and instance."""
    if lam < 0:
        raise ValueError(f"L1 coefficient must be non-negative, got {lam}")
    dtype = records[0].block_salience.dtype if records else DEFAULT_DTYPE
    total = Tensor(np.zeros((), dtype=dtype))
    if lam == 0 or not records:
        return total
    for record in records:
        total = add(total, sum_all(abs_(record.block_salience)))
        total = add(total, sum_all(abs_(record.channel_salience)))
    return mul(total, lam)
