"""Neural-network layer primitives with forward and backward rules.

Convolution is cross-correlation computed by unfolding patches (im2col) and one
batched matrix product. Each primitive also has a raw-array kernel, used by the
structural skipping executor, which can tally the FLOPs it actually performs
into a ``FlopsCounter``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .const import (
    BN_FLOPS_PER_ELEMENT,
    DEFAULT_BN_EPSILON,
    DEFAULT_BN_MOMENTUM,
    DEFAULT_DTYPE,
    FLOPS_PER_MAC,
    POOL_FLOPS_PER_ELEMENT,
    RELU_FLOPS_PER_ELEMENT,
)
from .errors import DataError, ShapeError
from .tensor import Function, Tensor

_LOGGER = logging.getLogger(__name__)


@dataclass
class FlopsCounter:
    """Tally of FLOPs performed by raw-array kernels, grouped by tag."""

    total: int = 0
    by_tag: dict[str, int] = field(default_factory=dict)

    def add(self, tag: str, flops: int) -> None:
        """Record ``flops`` under ``tag``."""
        self.total += int(flops)
        self.by_tag[tag] = self.by_tag.get(tag, 0) + int(flops)

    def reset(self) -> None:
        """Forget everything counted so far."""
        self.total = 0
        self.by_tag.clear()


@dataclass
class Conv2dParams:
    """Convolution weights (out, in, kH, kW), optional bias, stride and padding."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    @property
    def out_channels(self) -> int:
        """Return the number of output channels."""
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        """Return the number of input channels."""
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        """Return (kH, kW)."""
        return self.weight.shape[2], self.weight.shape[3]

    def validate(self) -> list[str]:
        """Validate the parameters and return a list of errors."""
        errors = []
        if self.weight.ndim != 4:
            errors.append(f"Conv weight must have 4 axes, got shape {self.weight.shape}")
            return errors
        if min(self.weight.shape) < 1:
            errors.append(f"Conv weight extents must be positive, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            errors.append(f"Conv bias shape {self.bias.shape} does not match {self.out_channels}")
        if self.stride < 1:
            errors.append(f"Stride must be positive, got {self.stride}")
        if self.padding < 0:
            errors.append(f"Padding cannot be negative, got {self.padding}")
        return errors


@dataclass
class BatchNormParams:
    """Per-channel affine parameters and running statistics."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = DEFAULT_BN_MOMENTUM
    epsilon: float = DEFAULT_BN_EPSILON

    @property
    def channels(self) -> int:
        """Return the number of channels."""
        return self.scale.shape[0]

    def validate(self) -> list[str]:
        """Validate the parameters and return a list of errors."""
        errors = []
        shapes = {
            self.scale.shape,
            self.shift.shape,
            self.running_mean.shape,
            self.running_var.shape,
        }
        if len(shapes) != 1:
            errors.append(f"Batch norm vectors disagree in shape: {sorted(shapes)}")
        if not 0.0 < self.momentum < 1.0:
            errors.append(f"Batch norm momentum must be in (0, 1), got {self.momentum}")
        if self.epsilon <= 0.0:
            errors.append(f"Batch norm epsilon must be positive, got {self.epsilon}")
        if np.any(self.running_var < 0):
            errors.append("Running variance must be non-negative")
        return errors


@dataclass
class LinearParams:
    """Fully-connected weight (out, in) and bias (out)."""

    weight: Tensor
    bias: Tensor

    @property
    def in_features(self) -> int:
        """Return the input size."""
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        """Return the output size."""
        return self.weight.shape[0]

    def validate(self) -> list[str]:
        """Validate the parameters and return a list of errors."""
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            return [
                f"Linear weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            ]
        return []


def kaiming_normal(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype: str = DEFAULT_DTYPE
) -> np.ndarray:
    """Draw weights with std sqrt(2 / fan_in)."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_conv2d(
    rng: np.random.Generator,
    in_channels: int,
    out_channels: int,
    kernel_size: int,
    stride: int = 1,
    padding: int = 0,
    bias: bool = False,
    dtype: str = DEFAULT_DTYPE,
) -> Conv2dParams:
    """Create a Kaiming-initialised convolution."""
    shape = (out_channels, in_channels, kernel_size, kernel_size)
    weight = kaiming_normal(rng, shape, in_channels * kernel_size * kernel_size, dtype)
    return Conv2dParams(
        weight=Tensor(weight, requires_grad=True),
        bias=Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None,
        stride=stride,
        padding=padding,
    )


def init_batch_norm(channels: int, dtype: str = DEFAULT_DTYPE) -> BatchNormParams:
    """Create an identity batch norm."""
    return BatchNormParams(
        scale=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        shift=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
    )


def init_linear(
    rng: np.random.Generator, in_features: int, out_features: int, dtype: str = DEFAULT_DTYPE
) -> LinearParams:
    """Create a Kaiming-initialised fully-connected layer with zero bias."""
    weight = kaiming_normal(rng, (out_features, in_features), in_features, dtype)
    return LinearParams(
        weight=Tensor(weight, requires_grad=True),
        bias=Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# Raw-array kernels
# ---------------------------------------------------------------------------


def conv_output_hw(
    height: int, width: int, kernel: tuple[int, int], stride: int, padding: int
) -> tuple[int, int]:
    """Return the output spatial extents of a convolution."""
    kh, kw = kernel
    if height + 2 * padding < kh or width + 2 * padding < kw:
        raise ShapeError(
            "conv2d",
            (height, width),
            (kh, kw),
            detail=f"degenerate output extent with padding {padding}",
        )
    return (height + 2 * padding - kh) // stride + 1, (width + 2 * padding - kw) // stride + 1


def im2col(x: np.ndarray, kernel: tuple[int, int], stride: int, padding: int) -> np.ndarray:
    """Unfold patches into (N, C*kH*kW, outH*outW) columns."""
    n, c, h, w = x.shape
    kh, kw = kernel
    out_h, out_w = conv_output_hw(h, w, kernel, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    x = np.ascontiguousarray(x)
    sn, sc, sh, sw = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, out_h, out_w),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(n, c * kh * kw, out_h * out_w)


def col2im(
    cols: np.ndarray,
    x_shape: tuple[int, int, int, int],
    kernel: tuple[int, int],
    stride: int,
    padding: int,
) -> np.ndarray:
    """Scatter-add columns back into an image; the adjoint of ``im2col``."""
    n, c, h, w = x_shape
    kh, kw = kernel
    out_h, out_w = conv_output_hw(h, w, kernel, stride, padding)
    image = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    blocks = cols.reshape(n, c, kh, kw, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            image[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += blocks[
                :, :, i, j
            ]
    if padding:
        image = image[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(image)


def conv2d_array(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None,
    stride: int,
    padding: int,
    counter: FlopsCounter | None = None,
    tag: str = "conv",
) -> np.ndarray:
    """Convolve raw arrays; the input channel count may be zero."""
    n, _, h, w = x.shape
    out_channels = weight.shape[0]
    kernel = (weight.shape[2], weight.shape[3])
    out_h, out_w = conv_output_hw(h, w, kernel, stride, padding)
    cols = im2col(x, kernel, stride, padding)
    flat = weight.reshape(out_channels, -1)
    out = np.matmul(flat, cols).reshape(n, out_channels, out_h, out_w)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    if counter is not None:
        macs = n * flat.shape[0] * flat.shape[1] * cols.shape[2]
        bias_ops = out.size if bias is not None else 0
        counter.add(tag, FLOPS_PER_MAC * macs + bias_ops)
    return out


def batch_norm_eval_array(
    x: np.ndarray,
    scale: np.ndarray,
    shift: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    epsilon: float,
    counter: FlopsCounter | None = None,
    tag: str = "bn",
) -> np.ndarray:
    """Apply inference batch norm as a per-channel affine map."""
    gain = scale / np.sqrt(var + epsilon)
    offset = shift - mean * gain
    if counter is not None:
        counter.add(tag, BN_FLOPS_PER_ELEMENT * x.size)
    return x * gain.reshape(1, -1, 1, 1) + offset.reshape(1, -1, 1, 1)


def relu_array(x: np.ndarray, counter: FlopsCounter | None = None, tag: str = "relu") -> np.ndarray:
    """Elementwise max(0, x)."""
    if counter is not None:
        counter.add(tag, RELU_FLOPS_PER_ELEMENT * x.size)
    return np.maximum(x, 0)


def global_avg_pool_array(
    x: np.ndarray, counter: FlopsCounter | None = None, tag: str = "pool"
) -> np.ndarray:
    """Mean over the spatial axes."""
    if counter is not None:
        counter.add(tag, POOL_FLOPS_PER_ELEMENT * x.size)
    return x.sum(axis=(2, 3)) / (x.shape[2] * x.shape[3])


def linear_array(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    counter: FlopsCounter | None = None,
    tag: str = "linear",
) -> np.ndarray:
    """Affine map x @ W^T + b."""
    if counter is not None:
        counter.add(tag, FLOPS_PER_MAC * x.shape[0] * weight.size + x.shape[0] * bias.size)
    return x @ weight.T + bias


# ---------------------------------------------------------------------------
# Differentiable operations
# ---------------------------------------------------------------------------


class _Conv2d(Function):
    op = "conv2d"

    def forward(
        self,
        x: np.ndarray,
        weight: np.ndarray,
        *bias: np.ndarray,
        stride: int = 1,
        padding: int = 0,
    ) -> np.ndarray:
        n, _, h, w = x.shape
        kernel = (weight.shape[2], weight.shape[3])
        out_h, out_w = conv_output_hw(h, w, kernel, stride, padding)
        cols = im2col(x, kernel, stride, padding)
        self.saved.update(cols=cols, weight=weight, x_shape=x.shape, stride=stride, padding=padding)
        self.saved["has_bias"] = bool(bias)
        out = np.matmul(weight.reshape(weight.shape[0], -1), cols)
        out = out.reshape(n, weight.shape[0], out_h, out_w)
        if bias:
            out = out + bias[0].reshape(1, -1, 1, 1)
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        cols, weight = self.saved["cols"], self.saved["weight"]
        n, out_channels = grad.shape[0], grad.shape[1]
        flat_grad = grad.reshape(n, out_channels, -1)
        grad_weight = np.tensordot(flat_grad, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        grad_cols = np.matmul(weight.reshape(out_channels, -1).T, flat_grad)
        grad_x = col2im(
            grad_cols,
            self.saved["x_shape"],
            (weight.shape[2], weight.shape[3]),
            self.saved["stride"],
            self.saved["padding"],
        )
        if self.saved["has_bias"]:
            return grad_x, grad_weight, grad.sum(axis=(0, 2, 3))
        return grad_x, grad_weight


class _GlobalAvgPool(Function):
    op = "global_avg_pool"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.saved["shape"] = x.shape
        return global_avg_pool_array(x)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        n, c, h, w = self.saved["shape"]
        spread = np.broadcast_to((grad / (h * w)).reshape(n, c, 1, 1), (n, c, h, w))
        return (spread.copy(),)


class _Linear(Function):
    op = "linear"

    def forward(self, x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
        self.saved["x"] = x
        self.saved["weight"] = weight
        return linear_array(x, weight, bias)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        x, weight = self.saved["x"], self.saved["weight"]
        return grad @ weight, grad.T @ x, grad.sum(axis=0)


class _BatchNormTrain(Function):
    op = "batch_norm_train"

    def forward(
        self,
        x: np.ndarray,
        scale: np.ndarray,
        shift: np.ndarray,
        mean: np.ndarray,
        var: np.ndarray,
        epsilon: float = 1e-5,
    ) -> np.ndarray:
        inv_std = 1.0 / np.sqrt(var + epsilon)
        normalized = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        self.saved.update(normalized=normalized, inv_std=inv_std, scale=scale)
        return normalized * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        normalized, inv_std, scale = (
            self.saved["normalized"],
            self.saved["inv_std"],
            self.saved["scale"],
        )
        axes = (0, 2, 3)
        count = grad.size // grad.shape[1]
        grad_normalized = grad * scale.reshape(1, -1, 1, 1)
        sum_grad = grad_normalized.sum(axis=axes, keepdims=True)
        sum_grad_norm = (grad_normalized * normalized).sum(axis=axes, keepdims=True)
        grad_x = (
            inv_std.reshape(1, -1, 1, 1)
            / count
            * (count * grad_normalized - sum_grad - normalized * sum_grad_norm)
        )
        return grad_x, (grad * normalized).sum(axis=axes), grad.sum(axis=axes)


class _BatchNormEval(Function):
    op = "batch_norm_eval"

    def forward(
        self,
        x: np.ndarray,
        scale: np.ndarray,
        shift: np.ndarray,
        mean: np.ndarray | None = None,
        var: np.ndarray | None = None,
        epsilon: float = 1e-5,
    ) -> np.ndarray:
        assert mean is not None and var is not None
        inv_std = 1.0 / np.sqrt(var + epsilon)
        self.saved["normalized"] = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        self.saved["gain"] = scale * inv_std
        return batch_norm_eval_array(x, scale, shift, mean, var, epsilon)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        axes = (0, 2, 3)
        grad_x = grad * self.saved["gain"].reshape(1, -1, 1, 1)
        return grad_x, (grad * self.saved["normalized"]).sum(axis=axes), grad.sum(axis=axes)


class _Relu(Function):
    op = "relu"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.saved["mask"] = x > 0
        return relu_array(x)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.saved["mask"],)


class _SoftmaxCrossEntropy(Function):
    op = "cross_entropy"

    def forward(self, logits: np.ndarray, labels: np.ndarray | None = None) -> np.ndarray:
        assert labels is not None
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.arange(logits.shape[0])
        self.saved.update(log_probs=log_probs, labels=labels, rows=rows)
        return np.asarray(-log_probs[rows, labels].mean(), dtype=logits.dtype)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        log_probs, labels, rows = self.saved["log_probs"], self.saved["labels"], self.saved["rows"]
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1.0
        return (probs * (grad / log_probs.shape[0]),)


def conv2d(x: Tensor, params: Conv2dParams) -> Tensor:
    """Cross-correlate a batch with the given kernels."""
    if x.ndim != 4:
        raise ShapeError("conv2d", x.shape, detail="input must have 4 axes")
    if x.shape[1] != params.in_channels:
        raise ShapeError("conv2d", x.shape, params.weight.shape, detail="channel mismatch")
    conv_output_hw(x.shape[2], x.shape[3], params.kernel_size, params.stride, params.padding)
    inputs = (x, params.weight) if params.bias is None else (x, params.weight, params.bias)
    return _Conv2d.apply(*inputs, stride=params.stride, padding=params.padding)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average each channel over its spatial extent, giving (N, C)."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape, detail="input must have 4 axes")
    return _GlobalAvgPool.apply(x)


def linear(x: Tensor, params: LinearParams) -> Tensor:
    """Affine map over the last axis."""
    if x.ndim != 2 or x.shape[1] != params.in_features:
        raise ShapeError("linear", x.shape, params.weight.shape)
    return _Linear.apply(x, params.weight, params.bias)


def batch_norm(x: Tensor, params: BatchNormParams, training: bool) -> Tensor:
    """Normalize per channel.

    Training mode normalizes with batch statistics and updates the running
    statistics; eval mode applies the running statistics and mutates nothing.
    """
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ShapeError("batch_norm", x.shape, (params.channels,), detail="channel mismatch")
    if not training:
        return _BatchNormEval.apply(
            x,
            params.scale,
            params.shift,
            mean=params.running_mean,
            var=params.running_var,
            epsilon=params.epsilon,
        )
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    out = _BatchNormTrain.apply(
        x, params.scale, params.shift, mean=mean, var=var, epsilon=params.epsilon
    )
    count = x.size // x.shape[1]
    unbiased = var * count / (count - 1) if count > 1 else var
    m = params.momentum
    params.running_mean = ((1.0 - m) * params.running_mean + m * mean).astype(x.dtype)
    params.running_var = ((1.0 - m) * params.running_var + m * unbiased).astype(x.dtype)
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    return _Relu.apply(x)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        bad = int(labels[(labels < 0) | (labels >= logits.shape[1])][0])
        raise DataError(f"Label {bad} out of range [0, {logits.shape[1]})")
    return _SoftmaxCrossEntropy.apply(logits, labels=labels)
