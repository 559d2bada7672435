"""Diagnostics support for LC-Net models."""

from __future__ import annotations

from typing import Any

from .const import CIFAR10_IMAGE_SIZE, Placement
from .cost_model import CostConfig, all_on_trace, gate_flops, instance_cost
from .network import NetworkSpec, parameter_groups


def _count(params: list[tuple[str, Any]]) -> int:
    return int(sum(tensor.data.size for _, tensor in params))


def network_summary(
    net: NetworkSpec, image_hw: tuple[int, int] = (CIFAR10_IMAGE_SIZE, CIFAR10_IMAGE_SIZE)
) -> dict[str, Any]:
    """Return parameter and nominal cost figures for a network."""
    groups = parameter_groups(net)
    backbone_params = _count(groups["backbone"])
    gate_params = _count(groups["gate"])

    trace = all_on_trace(net, image_hw)
    dense = instance_cost(trace, net, CostConfig(placement=Placement.DENSE))
    blocks = []
    total_gate_flops = 0
    for spec, entry, flops in zip(net.blocks, trace.blocks, dense.blocks, strict=True):
        gates = gate_flops(spec, entry.input_hw)
        total_gate_flops += gates
        blocks.append(
            {
                "kind": str(spec.kind),
                "in_channels": spec.in_channels,
                "out_channels": spec.out_channels,
                "stride": spec.stride,
                "gated_channels": spec.gated_channels,
                "projection_shortcut": spec.has_projection_shortcut,
                "input_hw": list(entry.input_hw),
                "dense_flops": flops,
                "gate_flops": gates,
            }
        )

    return {
        "model": net.config.to_dict(),
        "num_blocks": len(net.blocks),
        "backbone_parameters": backbone_params,
        "gate_parameters": gate_params,
        "gate_parameter_overhead": gate_params / backbone_params if backbone_params else 0.0,
        "dense_flops": dense.total,
        "gate_flops": total_gate_flops,
        "gate_flops_overhead": total_gate_flops / dense.total if dense.total else 0.0,
        "blocks": blocks,
    }
