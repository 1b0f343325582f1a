"""Graph intermediate representation.

A :class:`Model` is an immutable DAG of :class:`Node` objects connected by
named activation edges.  Each edge carries a ``(c, h, w)`` shape; the batch
dimension is fixed at 1.  Weight tensors live in ``Model.tensors`` keyed by
name and are referenced from nodes through ``weights`` / ``bias``.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from enum import Enum
from types import MappingProxyType
from typing import Mapping, Union

import numpy as np

from .errors import GraphError, InvalidArgument, ValidationError

Shape = tuple[int, int, int]


class LayerKind(str, Enum):
    INPUT = "Input"
    CONVOLUTION = "Convolution"
    DECONVOLUTION = "Deconvolution"
    FULLY_CONNECTED = "FullyConnected"
    BATCH_NORM = "BatchNorm"
    SCALE = "Scale"
    RELU = "ReLU"
    POOLING = "Pooling"
    ELTWISE_ADD = "EltwiseAdd"

    @property
    def is_representation(self) -> bool:
        return self in REPRESENTATION_KINDS


REPRESENTATION_KINDS = frozenset(
    {LayerKind.CONVOLUTION, LayerKind.DECONVOLUTION, LayerKind.FULLY_CONNECTED}
)


@dataclass(frozen=True)
class ConvParams:
    c_o: int
    c_i: int
    k_h: int = 1
    k_w: int = 1
    s_h: int = 1
    s_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    g: int = 1

    def weight_dims(self, kind: LayerKind) -> tuple[int, int, int, int]:
        if kind is LayerKind.FULLY_CONNECTED:
            return (self.c_o, self.c_i, 1, 1)
        return (self.c_o, self.c_i // self.g, self.k_h, self.k_w)

    @property
    def is_pointwise(self) -> bool:
        return (self.k_h, self.k_w, self.s_h, self.s_w, self.pad_h, self.pad_w, self.g) == (1, 1, 1, 1, 0, 0, 1)


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float32).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BatchNormParams:
    mu: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "mu", _frozen_array(self.mu))
        object.__setattr__(self, "var", _frozen_array(self.var))
        object.__setattr__(self, "eps", float(self.eps))

    def __eq__(self, other):
        return (
            isinstance(other, BatchNormParams)
            and self.eps == other.eps
            and np.array_equal(self.mu, other.mu)
            and np.array_equal(self.var, other.var)
        )

    @property
    def channels(self) -> int:
        return self.mu.shape[0]

    def sigma(self) -> np.ndarray:
        """Per-channel standard deviation ``sqrt(var + eps)`` in float64."""
        return np.sqrt(self.var.astype(np.float64) + self.eps)


@dataclass(frozen=True, eq=False)
class ScaleParams:
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen_array(self.alpha))
        object.__setattr__(self, "beta", _frozen_array(self.beta))

    def __eq__(self, other):
        return (
            isinstance(other, ScaleParams)
            and np.array_equal(self.alpha, other.alpha)
            and np.array_equal(self.beta, other.beta)
        )

    @property
    def channels(self) -> int:
        return self.alpha.shape[0]


@dataclass(frozen=True)
class PoolParams:
    mode: str = "max"
    k_h: int = 2
    k_w: int = 2
    s_h: int = 2
    s_w: int = 2
    pad_h: int = 0
    pad_w: int = 0


Params = Union[ConvParams, BatchNormParams, ScaleParams, PoolParams, None]


@dataclass(frozen=True)
class Node:
    name: str
    kind: LayerKind
    inputs: tuple[str, ...]
    output: str
    params: Params = None
    weights: str | None = None
    bias: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "inputs", tuple(self.inputs))

    @property
    def is_representation(self) -> bool:
        return self.kind.is_representation


@dataclass(frozen=True)
class Violation:
    node: str | None
    code: str
    reason: str

    def __str__(self):
        return f"[{self.code}] {self.node or '<model>'}: {self.reason}"


@dataclass(frozen=True, eq=False)
class Model:
    input_shape: Shape
    nodes: tuple[Node, ...]
    tensors: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        frozen = {}
        for name, arr in self.tensors.items():
            a = np.asarray(arr, dtype=np.float32)
            if a.flags.writeable:
                a = a.copy()
                a.setflags(write=False)
            frozen[name] = a
        object.__setattr__(self, "tensors", MappingProxyType(frozen))

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise InvalidArgument(f"no node named '{name}'")

    def has_node(self, name: str) -> bool:
        return any(n.name == name for n in self.nodes)

    def producers(self) -> dict[str, Node]:
        return {n.output: n for n in self.nodes}

    def consumers(self) -> dict[str, list[Node]]:
        out: dict[str, list[Node]] = {}
        for n in self.nodes:
            for e in n.inputs:
                out.setdefault(e, []).append(n)
        return out

    def terminal_edges(self) -> list[str]:
        consumed = {e for n in self.nodes for e in n.inputs}
        return sorted(n.output for n in self.nodes if n.output not in consumed and n.kind is not LayerKind.INPUT)

    def weight(self, node: Node) -> np.ndarray:
        return self.tensors[node.weights]

    def bias_of(self, node: Node) -> np.ndarray | None:
        return None if node.bias is None else self.tensors[node.bias]

    def with_nodes(self, nodes, tensors=None) -> "Model":
        """New model with the given nodes; unreferenced tensors are dropped."""
        nodes = tuple(nodes)
        pool = dict(self.tensors if tensors is None else tensors)
        used = {r for n in nodes for r in (n.weights, n.bias) if r is not None}
        return Model(self.input_shape, nodes, {k: v for k, v in pool.items() if k in used})

    def graph_equal(self, other: "Model") -> bool:
        if self.input_shape != other.input_shape or self.nodes != other.nodes:
            return False
        if set(self.tensors) != set(other.tensors):
            return False
        return all(
            self.tensors[k].shape == other.tensors[k].shape
            and self.tensors[k].tobytes() == other.tensors[k].tobytes()
            for k in self.tensors
        )


def conv_output_hw(h, w, k_h, k_w, s_h, s_w, pad_h, pad_w):
    return (h + 2 * pad_h - k_h) // s_h + 1, (w + 2 * pad_w - k_w) // s_w + 1


def deconv_output_hw(h, w, k_h, k_w, s_h, s_w, pad_h, pad_w):
    return (h - 1) * s_h - 2 * pad_h + k_h, (w - 1) * s_w - 2 * pad_w + k_w


def infer_node_shape(kind: LayerKind, params: Params, in_shapes: list[Shape]) -> Shape:
    """Output shape of one node, or :class:`InvalidArgument` on mismatch."""
    kind = LayerKind(kind)
    if kind is LayerKind.INPUT:
        raise InvalidArgument("input node shape comes from the model declaration")
    if not in_shapes:
        raise InvalidArgument(f"{kind.value} needs at least one input")
    c, h, w = in_shapes[0]
    if kind in (LayerKind.CONVOLUTION, LayerKind.DECONVOLUTION):
        p = params
        if c != p.c_i:
            raise InvalidArgument(f"input has {c} channels, layer expects c_i={p.c_i}")
        if kind is LayerKind.CONVOLUTION:
            oh, ow = conv_output_hw(h, w, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w)
        else:
            oh, ow = deconv_output_hw(h, w, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w)
        if oh < 1 or ow < 1:
            raise InvalidArgument(f"non-positive output size {oh}x{ow}")
        return (p.c_o, oh, ow)
    if kind is LayerKind.FULLY_CONNECTED:
        if c * h * w != params.c_i:
            raise InvalidArgument(f"flattened input has {c * h * w} values, layer expects c_i={params.c_i}")
        return (params.c_o, 1, 1)
    if kind in (LayerKind.BATCH_NORM, LayerKind.SCALE):
        if params.channels != c:
            raise InvalidArgument(f"{params.channels} per-channel parameters for {c} channels")
        return (c, h, w)
    if kind is LayerKind.RELU:
        return (c, h, w)
    if kind is LayerKind.POOLING:
        p = params
        oh, ow = conv_output_hw(h, w, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w)
        if oh < 1 or ow < 1:
            raise InvalidArgument(f"non-positive output size {oh}x{ow}")
        return (c, oh, ow)
    if kind is LayerKind.ELTWISE_ADD:
        if any(s != in_shapes[0] for s in in_shapes):
            raise InvalidArgument(f"eltwise inputs disagree: {in_shapes}")
        return (c, h, w)
    raise InvalidArgument(f"unknown layer kind {kind}")


def _check_node_static(m: Model, n: Node) -> list[Violation]:
    out = []
    k = n.kind
    if k is LayerKind.INPUT:
        if n.inputs:
            out.append(Violation(n.name, "arity", "input node must not have inputs"))
        return out
    expected_params = {
        LayerKind.CONVOLUTION: ConvParams,
        LayerKind.DECONVOLUTION: ConvParams,
        LayerKind.FULLY_CONNECTED: ConvParams,
        LayerKind.BATCH_NORM: BatchNormParams,
        LayerKind.SCALE: ScaleParams,
        LayerKind.POOLING: PoolParams,
    }.get(k)
    if expected_params is not None and not isinstance(n.params, expected_params):
        out.append(Violation(n.name, "params", f"{k.value} needs {expected_params.__name__}"))
        return out
    arity = len(n.inputs)
    if k is LayerKind.ELTWISE_ADD:
        if arity < 2:
            out.append(Violation(n.name, "arity", "eltwise add needs at least two inputs"))
    elif arity != 1:
        out.append(Violation(n.name, "arity", f"{k.value} takes exactly one input, got {arity}"))
    if k.is_representation:
        p = n.params
        ints = [p.c_o, p.c_i, p.k_h, p.k_w, p.s_h, p.s_w, p.g]
        if any(v < 1 for v in ints) or p.pad_h < 0 or p.pad_w < 0:
            out.append(Violation(n.name, "params", "non-positive convolution parameter"))
            return out
        if p.c_i % p.g or p.c_o % p.g:
            out.append(Violation(n.name, "groups", f"channels ({p.c_o}, {p.c_i}) not divisible by g={p.g}"))
            return out
        if k is LayerKind.FULLY_CONNECTED and (p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w, p.g) != (1, 1, 1, 1, 0, 0, 1):
            out.append(Violation(n.name, "params", "fully-connected layer must have unit kernel/stride and g=1"))
        if n.weights is None:
            out.append(Violation(n.name, "weights", "representation layer has no weights"))
        elif n.weights not in m.tensors:
            out.append(Violation(n.name, "dangling", f"weight tensor '{n.weights}' not found"))
        else:
            got = m.tensors[n.weights].shape
            want = p.weight_dims(k)
            if tuple(got) != want:
                out.append(Violation(n.name, "shape", f"weight dims {tuple(got)} != expected {want}"))
        if n.bias is not None:
            if n.bias not in m.tensors:
                out.append(Violation(n.name, "dangling", f"bias tensor '{n.bias}' not found"))
            elif m.tensors[n.bias].shape != (p.c_o,):
                out.append(Violation(n.name, "shape", f"bias dims {m.tensors[n.bias].shape} != ({p.c_o},)"))
    else:
        if n.weights is not None or n.bias is not None:
            out.append(Violation(n.name, "weights", f"{k.value} does not take weight tensors"))
    if k is LayerKind.BATCH_NORM:
        p = n.params
        if p.mu.shape != p.var.shape:
            out.append(Violation(n.name, "params", "mean and variance lengths differ"))
        if np.any(p.var < 0):
            out.append(Violation(n.name, "params", "negative variance"))
        if not p.eps >= 0:
            out.append(Violation(n.name, "params", "eps must be non-negative"))
    if k is LayerKind.SCALE and n.params.alpha.shape != n.params.beta.shape:
        out.append(Violation(n.name, "params", "alpha and beta lengths differ"))
    if k is LayerKind.POOLING:
        p = n.params
        if p.mode not in ("max", "avg"):
            out.append(Violation(n.name, "params", f"unknown pooling mode '{p.mode}'"))
        if min(p.k_h, p.k_w, p.s_h, p.s_w) < 1 or min(p.pad_h, p.pad_w) < 0:
            out.append(Violation(n.name, "params", "bad pooling window"))
    return out


def validate(m: Model) -> list[Violation]:
    """Every invariant violation of ``m``; an empty list means executable."""
    violations: list[Violation] = []
    names = [n.name for n in m.nodes]
    for name in sorted({x for x in names if names.count(x) > 1}):
        violations.append(Violation(name, "duplicate-name", "node name used more than once"))
    producers: dict[str, list[str]] = {}
    for n in m.nodes:
        producers.setdefault(n.output, []).append(n.name)
    for edge, prods in sorted(producers.items()):
        if len(prods) > 1:
            violations.append(Violation(prods[1], "multi-producer", f"edge '{edge}' produced by {sorted(prods)}"))
    inputs = [n for n in m.nodes if n.kind is LayerKind.INPUT]
    if len(inputs) != 1:
        violations.append(Violation(None, "input", f"expected exactly one input node, found {len(inputs)}"))
    if any(d < 1 for d in m.input_shape) or len(m.input_shape) != 3:
        violations.append(Violation(None, "input", f"bad input shape {m.input_shape}"))
    for n in m.nodes:
        for e in n.inputs:
            if e not in producers:
                violations.append(Violation(n.name, "dangling-edge", f"input edge '{e}' has no producer"))
        violations.extend(_check_node_static(m, n))
    if violations:
        return violations
    try:
        order = topo_order(m)
    except GraphError as exc:
        return [Violation(exc.node, "cycle", str(exc))]
    shapes: dict[str, Shape] = {}
    for n in order:
        if n.kind is LayerKind.INPUT:
            shapes[n.output] = m.input_shape
            continue
        try:
            shapes[n.output] = infer_node_shape(n.kind, n.params, [shapes[e] for e in n.inputs])
        except InvalidArgument as exc:
            violations.append(Violation(n.name, "shape", str(exc)))
            return violations
    return violations


def ensure_valid(m: Model) -> None:
    problems = validate(m)
    if problems:
        raise ValidationError(problems)


def topo_order(m: Model) -> list[Node]:
    """Kahn's algorithm with ties broken by ascending node name."""
    producers = {}
    for n in m.nodes:
        producers.setdefault(n.output, n)
    by_name = {n.name: n for n in m.nodes}
    indeg = {n.name: 0 for n in m.nodes}
    succ: dict[str, list[str]] = {n.name: [] for n in m.nodes}
    for n in m.nodes:
        for e in n.inputs:
            p = producers.get(e)
            if p is not None:
                indeg[n.name] += 1
                succ[p.name].append(n.name)
    ready = [name for name, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        name = heapq.heappop(ready)
        order.append(by_name[name])
        for s in succ[name]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(ready, s)
    if len(order) != len(m.nodes):
        stuck = sorted(name for name, d in indeg.items() if d > 0)
        raise GraphError(f"graph contains a cycle through '{stuck[0]}'", node=stuck[0])
    return order


def infer_shapes(m: Model) -> dict[str, Shape]:
    """Edge name -> ``(c, h, w)`` for every edge; model must be valid."""
    ensure_valid(m)
    shapes: dict[str, Shape] = {}
    for n in topo_order(m):
        if n.kind is LayerKind.INPUT:
            shapes[n.output] = m.input_shape
        else:
            shapes[n.output] = infer_node_shape(n.kind, n.params, [shapes[e] for e in n.inputs])
    return shapes


def representation_order(m: Model) -> list[Node]:
    return [n for n in topo_order(m) if n.is_representation]


def depth_fraction(m: Model, node: str | Node) -> float:
    name = node.name if isinstance(node, Node) else node
    reps = [n.name for n in representation_order(m)]
    if name not in reps:
        if m.has_node(name):
            raise InvalidArgument(f"'{name}' is not a representation layer")
        raise InvalidArgument(f"no node named '{name}'")
    if len(reps) == 1:
        return 0.0
    return reps.index(name) / (len(reps) - 1)


def rename_edge(nodes, old: str, new: str) -> list[Node]:
    out = []
    for n in nodes:
        ins = tuple(new if e == old else e for e in n.inputs)
        o = new if n.output == old else n.output
        out.append(replace(n, inputs=ins, output=o) if (ins != n.inputs or o != n.output) else n)
    return out
