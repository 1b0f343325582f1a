"""Static FLOP and memory accounting.

One FLOP is one fused multiply-add.  Representation layers are charged
with the closed forms below (``h, w`` are the *input* spatial dims); every
other layer is charged one operation per input element.  Bias terms are
ignored.

=================  =====================================
Convolution        h*w*c_i*c_o*k_h*k_w / (s_h*s_w*g)
Deconvolution      h*w*c_i*c_o*k_h*k_w*s_h*s_w / g
FullyConnected     h*w*c*c_o   (c*h*w == c_i, flattened)
=================  =====================================
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model_ir import LayerKind, Model, Shape, infer_shapes, topo_order

BYTES_PER_VALUE = 4


def layer_flops(kind, params, in_shape: Shape) -> int:
    kind = LayerKind(kind)
    c, h, w = in_shape
    if kind is LayerKind.INPUT:
        return 0
    if kind is LayerKind.CONVOLUTION:
        p = params
        return (h * w * p.c_i * p.c_o * p.k_h * p.k_w) // (p.s_h * p.s_w * p.g)
    if kind is LayerKind.DECONVOLUTION:
        p = params
        return (h * w * p.c_i * p.c_o * p.k_h * p.k_w * p.s_h * p.s_w) // p.g
    if kind is LayerKind.FULLY_CONNECTED:
        return h * w * c * params.c_o
    return h * w * c


@dataclass
class NodeCost:
    name: str
    kind: str
    flops: int
    weight_bytes: int
    activation_bytes: int


@dataclass
class CostReport:
    nodes: list[NodeCost] = field(default_factory=list)

    @property
    def total_flops(self) -> int:
        return sum(n.flops for n in self.nodes)

    @property
    def representation_flops(self) -> int:
        return sum(n.flops for n in self.nodes if LayerKind(n.kind).is_representation)

    @property
    def weight_bytes(self) -> int:
        return sum(n.weight_bytes for n in self.nodes)

    @property
    def activation_bytes(self) -> int:
        return sum(n.activation_bytes for n in self.nodes)

    def by_name(self) -> dict[str, NodeCost]:
        return {n.name: n for n in self.nodes}

    def to_json(self) -> dict:
        return {
            "layers": [
                {
                    "name": n.name,
                    "kind": n.kind,
                    "flops": n.flops,
                    "weight_bytes": n.weight_bytes,
                    "activation_bytes": n.activation_bytes,
                }
                for n in self.nodes
            ],
            "totals": {
                "flops": self.total_flops,
                "weight_bytes": self.weight_bytes,
                "activation_bytes": self.activation_bytes,
            },
        }


def _param_values(m: Model, node) -> int:
    count = 0
    for ref in (node.weights, node.bias):
        if ref is not None:
            count += int(m.tensors[ref].size)
    p = node.params
    if node.kind is LayerKind.BATCH_NORM:
        count += 2 * p.channels
    elif node.kind is LayerKind.SCALE:
        count += 2 * p.channels
    return count


def model_cost(m: Model) -> CostReport:
    shapes = infer_shapes(m)
    report = CostReport()
    for n in topo_order(m):
        in_shape = m.input_shape if n.kind is LayerKind.INPUT else shapes[n.inputs[0]]
        report.nodes.append(
            NodeCost(
                name=n.name,
                kind=n.kind.value,
                flops=layer_flops(n.kind, n.params, in_shape),
                weight_bytes=BYTES_PER_VALUE * _param_values(m, n),
                activation_bytes=BYTES_PER_VALUE * int(np.prod(shapes[n.output])),
            )
        )
    return report


def filter_wise_break_even(c_i: int, c_o: int, k_h: int, k_w: int, g: int = 1) -> float:
    """Rank below which a filter-wise split strictly reduces FLOPs."""
    return c_i * c_o * k_w * k_h / (c_i * k_w * k_h + g * c_o)
