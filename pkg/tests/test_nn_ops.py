"""Tests for layer primitives."""

from __future__ import annotations

import numpy as np
import pytest

from lcnet.errors import DataError, ShapeError
from lcnet.nn_ops import (
    FlopsCounter,
    LinearParams,
    batch_norm,
    col2im,
    conv2d,
    conv2d_array,
    conv_output_hw,
    cross_entropy,
    global_avg_pool,
    im2col,
    init_batch_norm,
    init_conv2d,
    init_linear,
    linear,
    relu,
)
from lcnet.tensor import Tensor, backward, mul, sum_all


def _naive_conv(x, w, b, stride, padding):
    n, c, h, width = x.shape
    out_c, _, kh, kw = w.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((n, out_c, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            patch = padded[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


class TestConvolution:
    """Test the im2col convolution."""

    @pytest.mark.parametrize("input_shape", [(2, 3, 7, 7), (2, 4, 8, 8)])
    @pytest.mark.parametrize("kernel", [1, 3])
    @pytest.mark.parametrize(("stride", "padding"), [(1, 1), (2, 1), (1, 0), (2, 0)])
    def test_matches_direct_loop(self, rng, input_shape, kernel, stride, padding):
        """Test conv2d_array equals a direct sliding-window sum."""
        x = rng.standard_normal(input_shape)
        w = rng.standard_normal((5, input_shape[1], kernel, kernel))
        b = rng.standard_normal(5)
        out = conv2d_array(x, w, b, stride, padding)
        np.testing.assert_allclose(out, _naive_conv(x, w, b, stride, padding), atol=1e-6)

    def test_bottleneck_projection_in_float32(self, rng):
        """Test a strided 1x1 convolution at working precision."""
        x = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
        w = rng.standard_normal((8, 4, 1, 1)).astype(np.float32)
        expected = _naive_conv(x.astype(np.float64), w.astype(np.float64), None, 2, 0)
        np.testing.assert_allclose(conv2d_array(x, w, None, 2, 0), expected, atol=1e-5)

    def test_output_extent(self):
        """Test output size formula and degenerate extents."""
        assert conv_output_hw(32, 32, (3, 3), 1, 1) == (32, 32)
        assert conv_output_hw(32, 32, (3, 3), 2, 1) == (16, 16)
        assert conv_output_hw(8, 8, (1, 1), 2, 0) == (4, 4)
        with pytest.raises(ShapeError):
            conv_output_hw(2, 2, (5, 5), 1, 0)

    def test_col2im_is_adjoint(self, rng):
        """Test <im2col(x), y> == <x, col2im(y)>."""
        x = rng.standard_normal((1, 2, 6, 6))
        cols = im2col(x, (3, 3), 2, 1)
        y = rng.standard_normal(cols.shape)
        back = col2im(y, x.shape, (3, 3), 2, 1)
        assert np.isclose(np.sum(cols * y), np.sum(x * back))

    def test_zero_input_channels(self):
        """Test a convolution over no channels yields zeros."""
        x = np.zeros((1, 0, 5, 5))
        w = np.zeros((3, 0, 3, 3))
        out = conv2d_array(x, w, None, 1, 1)
        assert out.shape == (1, 3, 5, 5)
        assert not out.any()

    def test_flops_tally(self, rng):
        """Test MACs are counted twice and bias once per output."""
        counter = FlopsCounter()
        x = rng.standard_normal((1, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        conv2d_array(x, w, np.zeros(4), 1, 1, counter, tag="stem")
        outputs = 4 * 8 * 8
        assert counter.total == 2 * outputs * 27 + outputs
        assert counter.by_tag == {"stem": counter.total}
        counter.reset()
        assert counter.total == 0
        assert counter.by_tag == {}

    def test_channel_mismatch(self, rng):
        """Test conv2d rejects a wrong input channel count."""
        params = init_conv2d(rng, 3, 4, 3, padding=1)
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 5, 5))), params)

    def test_gradients(self, rng, gradcheck):
        """Test conv2d gradients against finite differences."""
        params = init_conv2d(rng, 3, 4, 3, stride=2, padding=1, bias=True, dtype="float64")
        x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
        target = rng.standard_normal((2, 4, 3, 3))

        def loss():
            return sum_all(mul(conv2d(x, params), Tensor(target)))

        assert params.bias is not None
        assert gradcheck(loss, [x, params.weight, params.bias]) < 1e-4


class TestBatchNorm:
    """Test batch normalisation."""

    def test_train_mode_normalizes_and_updates_running_stats(self, rng):
        """Test batch statistics and the unbiased running variance."""
        params = init_batch_norm(2, dtype="float64")
        data = rng.standard_normal((4, 2, 3, 3)) * 3.0 + 1.0
        out = batch_norm(Tensor(data), params, training=True)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
        count = 4 * 3 * 3
        expected_var = 0.9 + 0.1 * data.var(axis=(0, 2, 3)) * count / (count - 1)
        np.testing.assert_allclose(params.running_var, expected_var)
        np.testing.assert_allclose(params.running_mean, 0.1 * data.mean(axis=(0, 2, 3)))

    def test_train_mode_tape_keeps_only_backward_inputs(self, rng):
        """Test the recorded node holds what the backward rule reads."""
        params = init_batch_norm(2, dtype="float64")
        out = batch_norm(Tensor(rng.standard_normal((2, 2, 3, 3))), params, training=True)
        assert out.node is not None
        assert set(out.node.saved) == {"normalized", "inv_std", "scale"}

    def test_eval_mode_uses_running_stats(self, rng):
        """Test eval mode is a fixed affine map that mutates nothing."""
        params = init_batch_norm(2, dtype="float64")
        params.running_mean = np.array([1.0, -1.0])
        params.running_var = np.array([4.0, 0.25])
        data = rng.standard_normal((1, 2, 2, 2))
        out = batch_norm(Tensor(data), params, training=False)
        expected = (data - params.running_mean.reshape(1, -1, 1, 1)) / np.sqrt(
            params.running_var.reshape(1, -1, 1, 1) + params.epsilon
        )
        np.testing.assert_allclose(out.data, expected)
        np.testing.assert_allclose(params.running_mean, [1.0, -1.0])

    def test_validate(self):
        """Test inconsistent vectors are reported."""
        params = init_batch_norm(3)
        assert params.validate() == []
        params.running_var = np.array([1.0, -1.0])
        assert len(params.validate()) == 2

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, rng, gradcheck, training):
        """Test batch norm gradients in both modes."""
        params = init_batch_norm(3, dtype="float64")
        params.scale.data = rng.uniform(0.5, 1.5, 3)
        params.shift.data = rng.standard_normal(3)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        target = Tensor(rng.standard_normal((2, 3, 4, 4)))

        def loss():
            return sum_all(mul(batch_norm(x, params, training), target))

        assert gradcheck(loss, [x, params.scale, params.shift]) < 1e-4


class TestHeadOps:
    """Test pooling, linear, ReLU and the loss."""

    def test_global_avg_pool(self):
        """Test spatial means."""
        x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
        np.testing.assert_allclose(global_avg_pool(x).data, [[1.5, 5.5]])

    def test_linear_shape_check(self, rng):
        """Test linear rejects the wrong feature count."""
        params = init_linear(rng, 4, 3)
        assert params.validate() == []
        with pytest.raises(ShapeError):
            linear(Tensor(np.zeros((2, 5))), params)

    def test_relu_gradient_masks_negatives(self):
        """Test ReLU passes gradient only where the input is positive."""
        x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
        backward(sum_all(relu(x)))
        np.testing.assert_allclose(x.grad, [0.0, 1.0, 1.0])

    def test_cross_entropy_of_uniform_logits(self):
        """Test zero logits give log(classes)."""
        loss = cross_entropy(Tensor(np.zeros((4, 10))), np.array([0, 3, 9, 1]))
        assert loss.item() == pytest.approx(np.log(10.0))

    def test_cross_entropy_rejects_bad_labels(self):
        """Test labels outside [0, classes) raise DataError."""
        with pytest.raises(DataError, match="Label 5"):
            cross_entropy(Tensor(np.zeros((2, 5))), np.array([0, 5]))

    def test_head_gradients(self, rng, gradcheck):
        """Test pool, linear and cross-entropy gradients together."""
        params = LinearParams(
            weight=Tensor(rng.standard_normal((3, 4)), requires_grad=True),
            bias=Tensor(rng.standard_normal(3), requires_grad=True),
        )
        x = Tensor(rng.standard_normal((5, 4, 3, 3)), requires_grad=True)
        labels = np.array([0, 1, 2, 1, 0])

        def loss():
            return cross_entropy(linear(global_avg_pool(relu(x)), params), labels)

        assert gradcheck(loss, [x, params.weight, params.bias]) < 1e-4
