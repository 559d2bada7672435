"""SGD with Nesterov momentum and the step learning-rate schedule."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .tensor import Tensor

_LOGGER = logging.getLogger(__name__)


def sgd_nesterov_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    velocities: list[np.ndarray | None],
    lr: float,
    momentum: float,
    weight_decay: float = 0.0,
) -> None:
    """One Nesterov update without dampening.

    For every parameter: g = grad + wd·w, v ← μ·v + g, w ← w − lr·(g + μ·v).
    Parameters whose gradient is None are left untouched. ``velocities`` holds
    one slot per parameter and is updated in place.
    """
    if not len(params) == len(grads) == len(velocities):
        raise ValueError("params, grads and velocities must have equal length")
    for index, (param, grad) in enumerate(zip(params, grads, strict=True)):
        if grad is None:
            continue
        g = grad + weight_decay * param.data if weight_decay else grad
        velocity = velocities[index]
        velocity = g.copy() if velocity is None else momentum * velocity + g
        velocities[index] = velocity
        param.data = (param.data - lr * (g + momentum * velocity)).astype(param.dtype)


@dataclass
class ParamGroup:
    """Parameters sharing one learning rate and weight decay."""

    name: str
    params: list[Tensor]
    lr: float
    weight_decay: float = 0.0
    velocities: list[np.ndarray | None] = field(default_factory=list)

    def __post_init__(self) -> None:
        """Allocate one velocity slot per parameter."""
        if not self.velocities:
            self.velocities = [None] * len(self.params)


class SGDNesterov:
    """Optimiser over named parameter groups."""

    def __init__(self, groups: Sequence[ParamGroup], momentum: float) -> None:
        """Initialize the optimiser."""
        self.groups = {group.name: group for group in groups}
        self.momentum = momentum

    def set_lr(self, rates: dict[str, float]) -> None:
        """Update the learning rate of each named group."""
        for name, lr in rates.items():
            if name in self.groups:
                self.groups[name].lr = lr

    def step(self) -> None:
        """Apply one update to every group."""
        for group in self.groups.values():
            sgd_nesterov_step(
                group.params,
                [param.grad for param in group.params],
                group.velocities,
                group.lr,
                self.momentum,
                group.weight_decay,
            )

    def zero_grad(self) -> None:
        """Reset the gradients of every parameter."""
        for group in self.groups.values():
            for param in group.params:
                param.grad = None


def lr_at_epoch(config: TrainConfig, epoch: int) -> tuple[float, float]:
    """Backbone and gate learning rates for a 0-based epoch.

    Each rate is its initial value divided by decay_factor^⌊epoch / decay_period⌋.
    """
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"Epoch {epoch} outside [0, {config.epochs})")
    divisor = config.decay_factor ** (epoch // config.decay_period)
    return config.backbone_lr / divisor, config.gate_lr / divisor
