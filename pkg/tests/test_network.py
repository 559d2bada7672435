"""Tests for network assembly, execution modes and traces."""

from __future__ import annotations

import numpy as np
import pytest

from lcnet.config import ModelConfig
from lcnet.const import BlockKind, ExecutionMode, Placement
from lcnet.errors import ShapeError, TraceError
from lcnet.gating import gate_l1_penalty
from lcnet.network import (
    ExecutionTrace,
    build_network,
    load_state_arrays,
    named_parameters,
    network_forward,
    parameter_groups,
    predictions,
    set_gates_constant,
    state_arrays,
    top_k_accuracy,
    total_loss,
    trace_instances,
)
from lcnet.nn_ops import cross_entropy
from lcnet.tensor import Tensor, mul, sum_all


class TestBuildNetwork:
    """Test network construction."""

    def test_micro_layout(self, micro_net):
        """Test block widths, strides and the classifier."""
        assert micro_net.validate() == []
        assert [b.out_channels for b in micro_net.blocks] == [4, 8, 8]
        assert [b.stride for b in micro_net.blocks] == [1, 2, 1]
        assert [b.has_projection_shortcut for b in micro_net.blocks] == [False, True, False]
        assert micro_net.num_classes == 3
        assert all(t.dtype == np.float32 for _, t in named_parameters(micro_net))

    def test_bottleneck_layout(self, bottleneck_config):
        """Test bottleneck stages expand their width."""
        net = build_network(bottleneck_config, 0)
        assert net.validate() == []
        assert [b.out_channels for b in net.blocks] == [8, 16]
        assert [b.gated_channels for b in net.blocks] == [2, 4]
        assert all(b.kind == BlockKind.BOTTLENECK for b in net.blocks)
        assert net.classifier.in_features == 16

    def test_same_seed_same_weights(self, micro_config):
        """Test construction is deterministic in the seed."""
        first = state_arrays(build_network(micro_config, 3))
        second = state_arrays(build_network(micro_config, 3))
        assert all(np.array_equal(first[k], second[k]) for k in first)

    def test_invalid_config(self):
        """Test an inconsistent config is rejected."""
        with pytest.raises(ValueError, match="stage"):
            build_network(ModelConfig(stage_widths=(4, 8), stage_depths=(1,)))

    def test_parameter_groups_partition(self, micro_net):
        """Test every parameter belongs to exactly one group."""
        groups = parameter_groups(micro_net)
        names = [name for name, _ in named_parameters(micro_net)]
        grouped = [name for name, _ in groups["backbone"]] + [name for name, _ in groups["gate"]]
        assert sorted(grouped) == sorted(names)
        assert all("gate" in name for name, _ in groups["gate"])
        assert len(groups["gate"]) == 4 * len(micro_net.blocks)


class TestStateArrays:
    """Test parameter export and import."""

    def test_load_copies_weights(self, micro_config, images):
        """Test a loaded network computes the same logits."""
        source = build_network(micro_config, 1)
        target = build_network(micro_config, 2)
        load_state_arrays(target, state_arrays(source))
        x = Tensor(images)
        first, _ = network_forward(x, source)
        second, _ = network_forward(x, target)
        np.testing.assert_array_equal(first.data, second.data)

    def test_shape_mismatch(self, micro_net):
        """Test a wrongly shaped array raises ShapeError."""
        arrays = dict(state_arrays(micro_net))
        arrays["classifier.bias"] = np.zeros(5, dtype=np.float32)
        with pytest.raises(ShapeError):
            load_state_arrays(micro_net, arrays)

    def test_missing_entry(self, micro_net):
        """Test a missing array raises KeyError."""
        arrays = dict(state_arrays(micro_net))
        del arrays["blocks.0.bns.0.running_var"]
        with pytest.raises(KeyError):
            load_state_arrays(micro_net, arrays)


class TestNetworkForward:
    """Test the execution modes."""

    def test_skipping_matches_dense(self, mixed_net, rng):
        """Test structural skipping reproduces dense logits under every placement."""
        x = Tensor(rng.standard_normal((3, 3, 8, 8)))
        dense, dense_entries = network_forward(x, mixed_net, ExecutionMode.EVAL_DENSE)
        assert not dense_entries[1].executed.any()
        for placement in Placement:
            skipped, entries = network_forward(
                x, mixed_net, ExecutionMode.EVAL_SKIPPING, placement=placement
            )
            np.testing.assert_allclose(skipped.data, dense.data, atol=1e-9)
            for entry, reference in zip(entries, dense_entries, strict=True):
                np.testing.assert_array_equal(entry.active_channels, reference.active_channels)

    def test_open_gates_match_ungated(self, micro_net, images):
        """Test gates fixed at 1 reproduce the plain network."""
        set_gates_constant(micro_net, 1.0, 1.0)
        x = Tensor(images)
        gated, entries = network_forward(x, micro_net)
        plain, none = network_forward(x, micro_net, gated=False)
        np.testing.assert_allclose(gated.data, plain.data, rtol=1e-5, atol=1e-6)
        assert none == []
        assert all(entry.executed.all() for entry in entries)

    def test_closed_gates_skip_every_block(self, micro_net, images):
        """Test gates fixed off execute nothing."""
        set_gates_constant(micro_net, -1.0, -1.0)
        _, entries = network_forward(Tensor(images), micro_net, ExecutionMode.EVAL_SKIPPING)
        assert len(entries) == 3
        assert not any(entry.executed.any() for entry in entries)
        assert all((entry.active_channels == 0).all() for entry in entries)

    def test_skipping_needs_gates(self, micro_net, images):
        """Test the skipping executor refuses ungated execution."""
        with pytest.raises(ValueError):
            network_forward(Tensor(images), micro_net, ExecutionMode.EVAL_SKIPPING, gated=False)

    def test_channel_mismatch(self, micro_net):
        """Test a wrong input channel count raises ShapeError."""
        with pytest.raises(ShapeError):
            network_forward(Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32)), micro_net)

    def test_train_mode_updates_running_stats(self, micro_net, images):
        """Test train mode uses batch statistics and mutates running stats."""
        before = micro_net.stem_bn.running_mean.copy()
        network_forward(Tensor(images), micro_net, ExecutionMode.TRAIN)
        assert not np.array_equal(before, micro_net.stem_bn.running_mean)

    def test_gradients(self, mixed_net, rng, gradcheck):
        """Test gradients of the training loss through the whole network."""
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        labels = np.array([0, 2])
        target = Tensor(rng.standard_normal((2, 3)))

        def loss():
            logits, traces = network_forward(x, mixed_net, ExecutionMode.TRAIN)
            return total_loss(logits, labels, traces, 0.01) + sum_all(mul(logits, target))

        params = dict(named_parameters(mixed_net))
        tensors = [
            params["stem.weight"],
            params["blocks.0.convs.1.weight"],
            params["blocks.2.channel_gate.bias"],
            params["blocks.2.block_gate.weight"],
            params["classifier.weight"],
        ]
        assert gradcheck(loss, tensors) < 1e-4


class TestLossAndMetrics:
    """Test the objective and accuracy helpers."""

    def test_zero_classifier_gives_log_classes(self, micro_net, images):
        """Test a zeroed classifier predicts uniformly."""
        micro_net.classifier.weight.data[:] = 0.0
        logits, _ = network_forward(Tensor(images), micro_net)
        loss = total_loss(logits, np.array([0, 1, 2, 0]), [], 0.5)
        assert loss.item() == pytest.approx(np.log(3.0), rel=1e-5)

    def test_penalty_is_added(self, micro_net, images):
        """Test total loss is cross-entropy plus lam times the L1 penalty."""
        labels = np.array([0, 1, 2, 0])
        logits, traces = network_forward(Tensor(images), micro_net, ExecutionMode.TRAIN)
        loss = total_loss(logits, labels, traces, 0.1).item()
        expected = (
            cross_entropy(logits, labels).item()
            + gate_l1_penalty([t.salience for t in traces], 0.1).item()
        )
        assert loss == pytest.approx(expected, rel=1e-5)

    def test_top_k(self):
        """Test top-1 and top-2 accuracy with ties broken by index."""
        logits = np.array([[3.0, 2.0, 1.0], [1.0, 1.0, 0.0], [0.0, 1.0, 2.0]])
        labels = np.array([0, 1, 1])
        assert top_k_accuracy(logits, labels, 1) == pytest.approx(1 / 3)
        assert top_k_accuracy(logits, labels, 2) == 1.0
        assert top_k_accuracy(logits, labels, 5) == 1.0
        np.testing.assert_array_equal(predictions(logits), [0, 0, 2])


class TestExecutionTrace:
    """Test per-instance traces."""

    def test_trace_instances(self, mixed_net, rng):
        """Test ids, labels and predictions of traced instances."""
        images = rng.standard_normal((5, 3, 8, 8))
        labels = np.array([0, 1, 2, 1, 0])
        traces = trace_instances(mixed_net, images, labels, batch_size=2, first_id=10)
        assert [t.instance_id for t in traces] == [10, 11, 12, 13, 14]
        assert [t.label for t in traces] == labels.tolist()
        logits, _ = network_forward(Tensor(images), mixed_net)
        assert [t.prediction for t in traces] == predictions(logits.data).tolist()
        assert all(len(t.blocks) == 3 for t in traces)
        assert traces[0].block_salience(1) == 0.0
        assert traces[0].channel_salience(2).shape == (8,)

    def test_train_mode_rejected(self, micro_net, images):
        """Test traces are never recorded in train mode."""
        with pytest.raises(ValueError):
            trace_instances(micro_net, images, np.zeros(4), ExecutionMode.TRAIN)

    def test_dict_form(self, mixed_net, rng):
        """Test the JSON-ready form keeps saliences and decisions."""
        images = rng.standard_normal((1, 3, 8, 8))
        (trace,) = trace_instances(mixed_net, images, np.array([2]))
        data = trace.to_dict()
        assert data["label"] == 2
        assert len(data["blocks"]) == 3
        restored = ExecutionTrace.from_dict(data)
        restored.check_against(mixed_net)
        for entry, original in zip(restored.blocks, trace.blocks, strict=True):
            assert entry.input_hw == original.input_hw
            np.testing.assert_array_equal(entry.executed, original.executed)
            np.testing.assert_array_equal(entry.active_channels, original.active_channels)

    def test_check_against_other_network(self, mixed_net, bottleneck_config, rng):
        """Test a trace of one network does not describe another."""
        (trace,) = trace_instances(mixed_net, rng.standard_normal((1, 3, 8, 8)), np.array([0]))
        with pytest.raises(TraceError):
            trace.check_against(build_network(bottleneck_config, 0))

    def test_bottleneck_skipping(self, bottleneck_config, rng):
        """Test the bottleneck network in skipping mode."""
        net = build_network(bottleneck_config, 4)
        images = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        dense, _ = network_forward(Tensor(images), net, ExecutionMode.EVAL_DENSE)
        skipped, entries = network_forward(Tensor(images), net, ExecutionMode.EVAL_SKIPPING)
        np.testing.assert_allclose(skipped.data, dense.data, rtol=1e-4, atol=1e-5)
        assert [e.input_hw for e in entries] == [(8, 8), (8, 8)]
