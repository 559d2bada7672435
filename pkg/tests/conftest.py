"""Fixtures for LC-Net tests."""

from __future__ import annotations

import os
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from lcnet.config import DataConfig, ModelConfig, TrainConfig
from lcnet.const import BlockKind
from lcnet.data import Dataset, make_synthetic
from lcnet.network import NetworkSpec, build_network, named_batch_norms, named_parameters
from lcnet.tensor import Tensor, backward

CIFAR10_ENV = "LCNET_CIFAR10_DIR"

GradCheck = Callable[..., float]

# Gradients smaller than this are compared absolutely
GRADIENT_FLOOR = 1e-3


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config() -> ModelConfig:
    """Two stages of basic blocks, narrow enough for exhaustive checks."""
    return ModelConfig(
        block_kind=BlockKind.BASIC,
        stage_widths=(4, 8),
        stage_depths=(1, 2),
        num_classes=3,
    )


@pytest.fixture
def bottleneck_config() -> ModelConfig:
    """One bottleneck stage followed by a strided one."""
    return ModelConfig(
        block_kind=BlockKind.BOTTLENECK,
        stage_widths=(2, 4),
        stage_depths=(1, 1),
        num_classes=3,
        stem_width=4,
    )


@pytest.fixture
def micro_net(micro_config: ModelConfig) -> NetworkSpec:
    """Freshly initialised basic-block network."""
    return build_network(micro_config, 7)


@pytest.fixture
def images(rng: np.random.Generator) -> np.ndarray:
    """Small float32 batch of 8×8 images."""
    return rng.standard_normal((4, 3, 8, 8)).astype(np.float32)


@pytest.fixture
def synthetic_data() -> tuple[Dataset, Dataset]:
    """Three-class synthetic train and test splits at 8×8."""
    train = make_synthetic(3, 48, seed=0, image_size=8)
    test = make_synthetic(3, 24, seed=1, image_size=8, stats=train.stats)
    return train, test


@pytest.fixture
def fast_train_config() -> TrainConfig:
    """A few quick epochs without decay."""
    return TrainConfig(epochs=2, batch_size=16, decay_period=2, seed=3)


@pytest.fixture
def data_config() -> DataConfig:
    """Small synthetic data section."""
    return DataConfig(
        synthetic_train=32,
        synthetic_test=16,
        synthetic_classes=3,
        image_size=8,
        augment_crop=False,
        augment_flip=False,
    )


@pytest.fixture
def cifar10_dir() -> Path:
    """CIFAR-10 binary directory, or skip."""
    value = os.environ.get(CIFAR10_ENV)
    if not value or not Path(value).is_dir():
        pytest.skip(f"{CIFAR10_ENV} is not set")
    return Path(value)


def to_float64(net: NetworkSpec) -> NetworkSpec:
    """Convert every parameter and running statistic to double precision in place."""
    for _, tensor in named_parameters(net):
        tensor.data = tensor.data.astype(np.float64)
    for _, bn in named_batch_norms(net):
        bn.running_mean = bn.running_mean.astype(np.float64)
        bn.running_var = bn.running_var.astype(np.float64)
    return net


@pytest.fixture
def mixed_net(micro_net: NetworkSpec, rng: np.random.Generator) -> NetworkSpec:
    """Double-precision micro network whose gates close some blocks and channels."""
    net = to_float64(micro_net)
    for _, bn in named_batch_norms(net):
        bn.running_mean = rng.standard_normal(bn.channels) * 0.1
        bn.running_var = rng.uniform(0.5, 2.0, bn.channels)
    for index, block in enumerate(net.blocks):
        gate = block.channel_gate
        gate.fc.weight.data = rng.standard_normal(gate.fc.weight.shape) * 0.05
        gate.fc.bias.data = rng.uniform(-0.6, 1.4, gate.out_features)
        block.block_gate.fc.bias.data = np.array([-1.0 if index == 1 else 0.8])
    return net


def _gradcheck(
    loss_fn: Callable[[], Tensor],
    tensors: list[Tensor],
    rng: np.random.Generator,
    samples: int = 12,
    eps: float = 1e-6,
) -> float:
    """Largest relative error between tape gradients and central differences.

    Each error is |analytic - numeric| / max(|analytic|, |numeric|). Entries below
    GRADIENT_FLOOR in magnitude sit at the finite-difference noise level and are
    divided by the floor instead, which bounds their absolute error by
    GRADIENT_FLOOR times the tolerance the caller asserts.
    """
    for tensor in tensors:
        tensor.grad = None
    backward(loss_fn())
    worst = 0.0
    for tensor in tensors:
        assert tensor.grad is not None
        analytic = tensor.grad.copy()
        flat = tensor.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for index in picks:
            original = flat[index]
            flat[index] = original + eps
            plus = loss_fn().item()
            flat[index] = original - eps
            minus = loss_fn().item()
            flat[index] = original
            numeric = (plus - minus) / (2 * eps)
            value = analytic.reshape(-1)[index]
            scale = max(abs(value), abs(numeric), GRADIENT_FLOOR)
            worst = max(worst, abs(value - numeric) / scale)
    return worst


@pytest.fixture
def gradcheck(rng: np.random.Generator) -> GradCheck:
    """Finite-difference gradient checker bound to the test generator."""

    def check(loss_fn: Callable[[], Tensor], tensors: list[Tensor], **kwargs) -> float:
        return _gradcheck(loss_fn, tensors, rng, **kwargs)

    return check
