"""Tests for the optimiser and learning-rate schedule."""

from __future__ import annotations

import numpy as np
import pytest

from lcnet.config import TrainConfig
from lcnet.const import Recipe
from lcnet.optim import ParamGroup, SGDNesterov, lr_at_epoch, sgd_nesterov_step
from lcnet.tensor import Tensor


class TestNesterovStep:
    """Test the update rule."""

    def test_two_steps_with_constant_gradient(self):
        """Test v = g then v = μg + g, and the look-ahead weight update."""
        param = Tensor(np.array([1.0, -2.0]))
        grad = np.array([0.5, 1.0])
        velocities: list[np.ndarray | None] = [None]
        sgd_nesterov_step([param], [grad], velocities, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(velocities[0], grad)
        np.testing.assert_allclose(param.data, [1.0, -2.0] - 0.1 * 1.9 * grad)
        sgd_nesterov_step([param], [grad], velocities, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(velocities[0], 1.9 * grad)
        np.testing.assert_allclose(param.data, [1.0, -2.0] - 0.1 * (1.9 + 2.71) * grad)

    def test_weight_decay_joins_the_gradient(self):
        """Test g = grad + wd·w."""
        param = Tensor(np.array([2.0]))
        velocities: list[np.ndarray | None] = [None]
        sgd_nesterov_step([param], [np.array([0.0])], velocities, 1.0, 0.0, weight_decay=0.5)
        np.testing.assert_allclose(param.data, [1.0])

    def test_missing_gradient_is_skipped(self):
        """Test a parameter without gradient keeps its value and velocity."""
        param = Tensor(np.array([3.0]))
        velocities: list[np.ndarray | None] = [None]
        sgd_nesterov_step([param], [None], velocities, 0.1, 0.9)
        assert param.data[0] == 3.0
        assert velocities[0] is None

    def test_dtype_is_kept(self):
        """Test float32 parameters stay float32."""
        param = Tensor(np.ones(3, dtype=np.float32))
        sgd_nesterov_step([param], [np.ones(3)], [None], 0.1, 0.9)
        assert param.dtype == np.float32

    def test_length_mismatch(self):
        """Test unequal argument lengths are rejected."""
        with pytest.raises(ValueError):
            sgd_nesterov_step([Tensor([1.0])], [], [None], 0.1, 0.9)


class TestSGDNesterov:
    """Test the grouped optimiser."""

    def test_groups_use_their_own_rates(self):
        """Test each group steps with its own learning rate and decay."""
        backbone = Tensor(np.array([1.0]), requires_grad=True)
        gate = Tensor(np.array([1.0]), requires_grad=True)
        optimizer = SGDNesterov(
            [ParamGroup("backbone", [backbone], 0.1, 0.0), ParamGroup("gate", [gate], 0.01)],
            momentum=0.0,
        )
        backbone.grad = np.array([1.0])
        gate.grad = np.array([1.0])
        optimizer.step()
        np.testing.assert_allclose(backbone.data, [0.9])
        np.testing.assert_allclose(gate.data, [0.99])

        optimizer.set_lr({"backbone": 1.0, "unknown": 5.0})
        assert optimizer.groups["backbone"].lr == 1.0
        optimizer.zero_grad()
        assert backbone.grad is None
        assert gate.grad is None


class TestSchedule:
    """Test the step decay."""

    def test_cifar_recipe(self):
        """Test decay by 10 every 90 epochs over 270 epochs."""
        config = TrainConfig.from_recipe(Recipe.CIFAR10)
        assert lr_at_epoch(config, 0) == pytest.approx((0.01, 0.01))
        assert lr_at_epoch(config, 89) == pytest.approx((0.01, 0.01))
        assert lr_at_epoch(config, 90) == pytest.approx((0.001, 0.001))
        assert lr_at_epoch(config, 269) == pytest.approx((0.0001, 0.0001))

    def test_imagenet_recipe_rates_differ(self):
        """Test the gate rate is scheduled independently of the backbone rate."""
        config = TrainConfig.from_recipe(Recipe.IMAGENET)
        backbone, gate = lr_at_epoch(config, 30)
        assert backbone == pytest.approx(0.0005)
        assert gate == pytest.approx(0.000001)

    @pytest.mark.parametrize("epoch", [-1, 270])
    def test_out_of_range(self, epoch):
        """Test epochs outside the run are rejected."""
        with pytest.raises(ValueError):
            lr_at_epoch(TrainConfig.from_recipe(Recipe.CIFAR10), epoch)
