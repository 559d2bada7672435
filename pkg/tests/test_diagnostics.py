"""Tests for the network summary."""

from __future__ import annotations

import json

from lcnet.const import Placement
from lcnet.cost_model import CostConfig, all_on_trace, instance_cost
from lcnet.diagnostics import network_summary
from lcnet.network import parameter_groups


class TestNetworkSummary:
    """Test parameter and nominal cost figures."""

    def test_summary(self, micro_net):
        """Test counts agree with the parameter groups and the cost model."""
        summary = network_summary(micro_net, (8, 8))
        groups = parameter_groups(micro_net)
        assert summary["num_blocks"] == 3
        assert summary["gate_parameters"] == sum(t.data.size for _, t in groups["gate"])
        assert summary["backbone_parameters"] == sum(t.data.size for _, t in groups["backbone"])
        trace = all_on_trace(micro_net, (8, 8))
        dense = instance_cost(trace, micro_net, CostConfig(Placement.DENSE))
        assert summary["dense_flops"] == dense.total
        assert [b["dense_flops"] for b in summary["blocks"]] == list(dense.blocks)
        assert 0 < summary["gate_flops_overhead"] < 1

    def test_blocks_and_serialisation(self, micro_net):
        """Test per-block entries describe the layout and the summary is JSON."""
        summary = json.loads(json.dumps(network_summary(micro_net, (8, 8))))
        first, second, _ = summary["blocks"]
        assert first["projection_shortcut"] is False
        assert second["projection_shortcut"] is True
        assert second["stride"] == 2
        assert second["input_hw"] == [8, 8]
        assert summary["model"]["num_classes"] == 3
