"""Holistic per-layer selection and the model-level rewrite.

Each representation layer (or approximation group) is decided
independently against the fused original weights, then every decision is
applied in one rewrite.  A candidate is admissible only if its accuracy
score reaches the layer threshold, which falls linearly from
``start_threshold`` at the first representation layer to ``p`` at the last.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, StaleGroupError
from .factorization import (
    FILTER_WISE,
    FactorizationCandidate,
    Layer,
    LayerSpec,
    SearchOptions,
    _pointwise,
    enumerate_candidates,
    is_power_of_two,
    rank_grid,
)
from .flops import layer_flops, model_cost
from .fusion import run_lossless_pass_logged
from .model_ir import (
    ConvParams,
    LayerKind,
    Model,
    Node,
    ensure_valid,
    infer_node_shape,
    infer_shapes,
    representation_order,
    topo_order,
)
from .tensor_core import explained_variation, svd, truncate


@dataclass(frozen=True)
class SelectorConfig:
    p: float
    start_threshold: float = 0.99
    target: str = "cpu"
    rank_grid: str = "pow2"
    max_chain: int = 2
    workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise InvalidArgument(f"p must lie in [0, 1], got {self.p}")
        if not 0.0 <= self.start_threshold <= 1.0:
            raise InvalidArgument(f"start threshold must lie in [0, 1], got {self.start_threshold}")
        if self.target not in ("cpu", "gpu"):
            raise InvalidArgument(f"target must be 'cpu' or 'gpu', got {self.target!r}")
        if self.max_chain < 1:
            raise InvalidArgument("max chain length must be at least 1")
        if self.workers < 1:
            raise InvalidArgument("workers must be at least 1")
        rank_grid(4, self.rank_grid)

    @property
    def effective_start(self) -> float:
        # the schedule never starts below its endpoint
        return max(self.start_threshold, self.p)

    def search_options(self) -> SearchOptions:
        return SearchOptions(self.p, self.target, self.rank_grid, self.max_chain)

    def to_json(self) -> dict:
        return {
            "p": self.p,
            "start_threshold": self.start_threshold,
            "effective_start_threshold": self.effective_start,
            "target": self.target,
            "rank_grid": self.rank_grid,
            "max_chain": self.max_chain,
        }


def layer_threshold(cfg: SelectorConfig, depth: float) -> float:
    start = cfg.effective_start
    return start - (start - cfg.p) * depth


def score(a: float, r: float, p: float) -> float:
    return p * a + (1.0 - p) * r


def choose_best(candidates, cfg: SelectorConfig, depth: float):
    """Highest-scoring admissible candidate, or ``None`` to keep the layer."""
    t = layer_threshold(cfg, depth)
    survivors = [c for c in candidates if c.accuracy >= t]
    if not survivors:
        return None
    for c in survivors:
        if math.isnan(c.score):
            c.score = score(c.accuracy, c.runtime, cfg.p)
    return min(survivors, key=FactorizationCandidate.sort_key)


# --- approximation groups --------------------------------------------------

SINGLE = "single"
SHARED_INPUT = "shared-input"
SHARED_OUTPUT_SUM = "shared-output-sum"


@dataclass(frozen=True, eq=False)
class ApproximationGroup:
    kind: str
    members: tuple[Node, ...]
    join: str | None = None
    weights: tuple[np.ndarray, ...] = field(default=(), repr=False)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.members)

    def concatenated_weight(self) -> np.ndarray:
        """Member weights stacked along output channels (shared input) or
        input channels (summed output)."""
        ws = [w.reshape(n.params.weight_dims(n.kind)) for n, w in zip(self.members, self.weights)]
        return np.concatenate(ws, axis=0 if self.kind != SHARED_OUTPUT_SUM else 1)

    @property
    def max_rank(self) -> int:
        w = self.concatenated_weight()
        return min(w.shape[0], int(np.prod(w.shape[1:])))

    def check_fresh(self, m: Model) -> None:
        for node, w in zip(self.members, self.weights):
            if not m.has_node(node.name):
                raise StaleGroupError(f"group member '{node.name}' no longer exists")
            cur = m.node(node.name)
            if cur != node or not np.array_equal(m.weight(cur), w):
                raise StaleGroupError(f"group member '{node.name}' changed since discovery")


def _group(kind, nodes, m, join=None):
    return ApproximationGroup(kind, tuple(nodes), join, tuple(m.weight(n) for n in nodes))


def _input_key(n: Node):
    p = n.params
    return (n.kind, n.inputs[0], p.c_i, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w, p.g)


def find_approximation_groups(m: Model) -> list[ApproximationGroup]:
    """Partition representation layers into approximation groups.

    Ungrouped layers come back as singletons.  Order follows the topological
    position of each group's first member.
    """
    shapes = infer_shapes(m)
    reps = representation_order(m)
    position = {n.name: i for i, n in enumerate(reps)}
    consumers = m.consumers()
    terminal = set(m.terminal_edges())
    taken: set[str] = set()
    groups: list[ApproximationGroup] = []

    buckets: dict[tuple, list[Node]] = {}
    for n in reps:
        if n.kind in (LayerKind.CONVOLUTION, LayerKind.FULLY_CONNECTED) and n.params.g == 1:
            buckets.setdefault(_input_key(n), []).append(n)
    for members in buckets.values():
        if len(members) >= 2:
            groups.append(_group(SHARED_INPUT, members, m, join=members[0].inputs[0]))
            taken.update(x.name for x in members)

    producers = m.producers()
    for add in topo_order(m):
        if add.kind is not LayerKind.ELTWISE_ADD:
            continue
        out_buckets: dict[tuple, list[Node]] = {}
        for e in dict.fromkeys(add.inputs):
            n = producers.get(e)
            if (
                n is None or n.kind is not LayerKind.CONVOLUTION or n.params.g != 1 or n.name in taken
                or e in terminal or len(consumers.get(e, [])) != 1 or add.inputs.count(e) != 1
            ):
                continue
            p = n.params
            key = (p.c_o, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w, p.g, shapes[n.inputs[0]][1:])
            out_buckets.setdefault(key, []).append(n)
        for members in out_buckets.values():
            if len(members) >= 2:
                groups.append(_group(SHARED_OUTPUT_SUM, members, m, join=add.name))
                taken.update(x.name for x in members)

    for n in reps:
        if n.name not in taken:
            groups.append(_group(SINGLE, [n], m))
    groups.sort(key=lambda g: min(position[x] for x in g.names))
    return groups


@dataclass(eq=False)
class GroupCandidate(FactorizationCandidate):
    group: ApproximationGroup | None = None
    member_flops: tuple[int, ...] = ()

    @property
    def intermediate_channels(self) -> list[int]:
        return [self.b[0]]


def _group_candidate(m: Model, group: ApproximationGroup, shapes, r, b: int) -> GroupCandidate:
    members = group.members
    before = sum(layer_flops(n.kind, n.params, shapes[n.inputs[0]]) for n in members)
    left, right = truncate(r, b)
    if group.kind == SHARED_INPUT:
        first = members[0]
        p = first.params
        co_total, ci, kh, kw = group.concatenated_weight().shape
        shared = LayerSpec(first.kind, ConvParams(b, p.c_i, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w, 1),
                           right.reshape(b, ci, kh, kw))
        specs = [shared]
        mid_shape = infer_node_shape(shared.kind, shared.params, [shapes[first.inputs[0]]])
        after = layer_flops(shared.kind, shared.params, shapes[first.inputs[0]])
        row = 0
        for n in members:
            co = n.params.c_o
            kind, params = _pointwise(n.kind, co, b)
            specs.append(LayerSpec(kind, params, left[row:row + co].reshape(co, b, 1, 1), m.bias_of(n)))
            after += layer_flops(kind, params, mid_shape)
            row += co
    else:
        co, ci_total, kh, kw = group.concatenated_weight().shape
        w1_all = right.reshape(b, ci_total, kh, kw)
        specs = []
        after = 0
        col = 0
        mid_shape = None
        for n in members:
            p = n.params
            spec = LayerSpec(LayerKind.CONVOLUTION, ConvParams(b, p.c_i, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w, 1),
                             np.ascontiguousarray(w1_all[:, col:col + p.c_i]))
            specs.append(spec)
            after += layer_flops(spec.kind, spec.params, shapes[n.inputs[0]])
            mid_shape = infer_node_shape(spec.kind, spec.params, [shapes[n.inputs[0]]])
            col += p.c_i
        biases = [m.bias_of(n) for n in members if n.bias is not None]
        bias = np.sum(np.stack(biases).astype(np.float64), axis=0).astype(np.float32) if biases else None
        shared = LayerSpec(LayerKind.CONVOLUTION, ConvParams(co, b), left.reshape(co, b, 1, 1), bias)
        specs.append(shared)
        after += layer_flops(shared.kind, shared.params, mid_shape)
        # the partial sums need an extra add, charged one op per element
        after += layer_flops(LayerKind.ELTWISE_ADD, None, mid_shape) * (len(members) - 1)
    member_flops = tuple(layer_flops(n.kind, n.params, shapes[n.inputs[0]]) for n in members)
    return GroupCandidate(FILTER_WISE, (b,), tuple(specs), explained_variation(r, b), before, after,
                          group=group, member_flops=member_flops)


def group_candidate(m: Model, group: ApproximationGroup, b: int, shapes=None) -> GroupCandidate:
    """The group replacement at rank ``b``, whether or not it saves FLOPs."""
    group.check_fresh(m)
    shapes = infer_shapes(m) if shapes is None else shapes
    wc = group.concatenated_weight()
    return _group_candidate(m, group, shapes, svd(wc.reshape(wc.shape[0], -1)), b)


def group_candidates(m: Model, group: ApproximationGroup, cfg: SelectorConfig, shapes=None) -> list[GroupCandidate]:
    group.check_fresh(m)
    shapes = infer_shapes(m) if shapes is None else shapes
    wc = group.concatenated_weight()
    r = svd(wc.reshape(wc.shape[0], -1))
    out = []
    for b in rank_grid(r.rank_bound, cfg.rank_grid):
        if cfg.target == "gpu" and not is_power_of_two(b):
            continue
        c = _group_candidate(m, group, shapes, r, b)
        if c.flops_after < c.flops_before:
            c.score = score(c.accuracy, c.runtime, cfg.p)
            out.append(c)
    out.sort(key=FactorizationCandidate.sort_key)
    return out


def approximate_group(m: Model, group: ApproximationGroup, cfg: SelectorConfig, depth: float, shapes=None):
    """Best admissible decision for ``group``; ``None`` keeps it unchanged."""
    group.check_fresh(m)
    shapes = infer_shapes(m) if shapes is None else shapes
    if len(group.members) == 1:
        layer = Layer.from_model(m, group.members[0].name, shapes)
        return choose_best(enumerate_candidates(layer, cfg.search_options()), cfg, depth)
    return choose_best(group_candidates(m, group, cfg, shapes), cfg, depth)


# --- model rewrite ---------------------------------------------------------

@dataclass
class Decision:
    group: ApproximationGroup
    depth: float
    threshold: float
    candidate: FactorizationCandidate | None
    reason: str
    n_candidates: int
    fallback: list["Decision"] = field(default_factory=list)


def _decide(m: Model, group: ApproximationGroup, cfg: SelectorConfig, depth: float, shapes) -> Decision:
    t = layer_threshold(cfg, depth)
    if len(group.members) == 1:
        layer = Layer.from_model(m, group.members[0].name, shapes)
        cands = enumerate_candidates(layer, cfg.search_options())
    else:
        cands = group_candidates(m, group, cfg, shapes)
    best = choose_best(cands, cfg, depth)
    if best is not None:
        reason = "best admissible score"
    elif not cands:
        reason = "no candidate reduces FLOPs"
    else:
        top_a = max(c.accuracy for c in cands)
        reason = f"no candidate reaches accuracy threshold {t:.6g} (best A={top_a:.6g})"
    d = Decision(group, depth, t, best, reason, len(cands))
    if best is None and len(group.members) > 1:
        # fall back to deciding the members one by one
        for node in group.members:
            single = ApproximationGroup(SINGLE, (node,), None, (m.weight(node),))
            d.fallback.append(_decide(m, single, cfg, depth, shapes))
    return d


class _Namer:
    def __init__(self, m: Model):
        self.used = {n.name for n in m.nodes} | {n.output for n in m.nodes} | set(m.tensors)

    def fresh(self, base: str) -> str:
        name, i = base, 1
        while name in self.used or f"{name}_w" in self.used or f"{name}_b" in self.used:
            name, i = f"{base}_{i}", i + 1
        self.used.update({name, f"{name}_w", f"{name}_b"})
        return name


def _emit(namer, tensors, base, spec: LayerSpec, inputs, output=None) -> Node:
    name = namer.fresh(base)
    tensors[f"{name}_w"] = spec.weight.astype(np.float32)
    bias = None
    if spec.bias is not None:
        bias = f"{name}_b"
        tensors[bias] = np.asarray(spec.bias, dtype=np.float32)
    return Node(name, spec.kind, tuple(inputs), output or name, spec.params, f"{name}_w", bias)


def _flatten_decisions(decisions):
    for d in decisions:
        if d.fallback:
            yield from _flatten_decisions(d.fallback)
        else:
            yield d


def _rewrite(m: Model, decisions) -> tuple[Model, dict[str, list[str]]]:
    namer = _Namer(m)
    tensors = dict(m.tensors)
    replaced: dict[str, list[Node]] = {}
    removed: set[str] = set()
    add_updates: dict[str, Node] = {}
    produced: dict[str, list[str]] = {}
    for d in _flatten_decisions(decisions):
        c = d.candidate
        g = d.group
        if c is None:
            continue
        if g.kind == SINGLE:
            node = g.members[0]
            new_nodes = []
            src = node.inputs[0]
            for j, spec in enumerate(c.replacement, 1):
                last = j == len(c.replacement)
                nn = _emit(namer, tensors, f"{node.name}.{j}", spec, [src], node.output if last else None)
                new_nodes.append(nn)
                src = nn.output
            replaced[node.name] = new_nodes
            produced[node.name] = [n.name for n in new_nodes]
        elif g.kind == SHARED_INPUT:
            first = g.members[0]
            shared = _emit(namer, tensors, f"{first.name}.shared", c.replacement[0], [first.inputs[0]])
            replaced[first.name] = [shared]
            for node, spec in zip(g.members, c.replacement[1:]):
                nn = _emit(namer, tensors, f"{node.name}.1", spec, [shared.output], node.output)
                replaced.setdefault(node.name, []).append(nn)
                produced[node.name] = [shared.name, nn.name]
        else:
            add = add_updates.get(g.join) or m.node(g.join)
            member_outputs = [n.output for n in g.members]
            firsts = [
                _emit(namer, tensors, f"{node.name}.1", spec, [node.inputs[0]])
                for node, spec in zip(g.members, c.replacement[:-1])
            ]
            partial = namer.fresh(f"{add.name}.partial")
            psum = Node(partial, LayerKind.ELTWISE_ADD, tuple(f.output for f in firsts), partial)
            whole = sorted(add.inputs) == sorted(member_outputs)
            shared = _emit(namer, tensors, f"{add.name}.shared", c.replacement[-1], [partial],
                           add.output if whole else None)
            for node, f in zip(g.members, firsts):
                replaced[node.name] = [f]
                produced[node.name] = [f.name, psum.name, shared.name]
            tail = [psum, shared]
            if whole:
                removed.add(add.name)
                add_updates.pop(add.name, None)
            else:
                ins = []
                for e in add.inputs:
                    if e in member_outputs:
                        if shared.output not in ins:
                            ins.append(shared.output)
                    else:
                        ins.append(e)
                add_updates[add.name] = Node(add.name, add.kind, tuple(ins), add.output)
            replaced[g.members[-1].name] = replaced[g.members[-1].name] + tail
    nodes: list[Node] = []
    for n in m.nodes:
        if n.name in removed:
            continue
        if n.name in replaced:
            nodes.extend(replaced[n.name])
        else:
            nodes.append(add_updates.get(n.name, n))
    out = m.with_nodes(nodes, tensors)
    ensure_valid(out)
    return out, produced


def apply_candidate(m: Model, name: str, candidate: FactorizationCandidate) -> Model:
    """Rewrite ``m`` with ``candidate`` replacing layer ``name`` (or its
    group, for a group candidate)."""
    if isinstance(candidate, GroupCandidate) and candidate.group is not None:
        group = candidate.group
        group.check_fresh(m)
    else:
        node = m.node(name)
        group = ApproximationGroup(SINGLE, (node,), None, (m.weight(node),))
    return _rewrite(m, [Decision(group, 0.0, 0.0, candidate, "explicit", 1)])[0]


def _round(x):
    return None if x is None else float(x)


@dataclass
class OptimizationReport:
    config: dict
    totals: dict
    layers: list[dict]

    def to_json(self) -> dict:
        return {"config": self.config, "totals": self.totals, "layers": self.layers}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def _record(d: Decision, node: Node, shapes, produced) -> dict:
    c = d.candidate
    flops_before = layer_flops(node.kind, node.params, shapes[node.inputs[0]])
    rec = {
        "name": node.name,
        "depth": d.depth,
        "threshold": d.threshold,
        "candidates_considered": d.n_candidates,
        "flops_before": flops_before,
    }
    if c is None:
        rec.update(action="kept", kind=None, b=None, A=None, R=None, S=None, flops_after=flops_before,
                   flop_ratio=1.0, reason=d.reason, nodes=[node.name], group=None)
        return rec
    rec.update(
        action="factorized",
        kind=c.kind,
        b=list(c.b) if len(c.b) > 1 else c.b[0],
        A=_round(c.accuracy),
        R=_round(c.runtime),
        S=_round(c.score),
        flops_after=c.flops_after,
        flop_ratio=_round(c.flop_ratio),
        reason=d.reason,
        nodes=produced.get(node.name, []),
        group=None,
    )
    if isinstance(c, GroupCandidate):
        # scores and FLOPs are group-wide for grouped members
        rec["group"] = {"kind": d.group.kind, "members": list(d.group.names), "join": d.group.join,
                        "flops_before": c.flops_before, "flops_after": c.flops_after}
    return rec


def optimize_model(m: Model, cfg: SelectorConfig) -> tuple[Model, OptimizationReport]:
    ensure_valid(m)
    cost_in = model_cost(m)
    fused, events = run_lossless_pass_logged(m)
    cost_fused = model_cost(fused)
    shapes = infer_shapes(fused)
    reps = [n.name for n in representation_order(fused)]
    depth = {name: (i / (len(reps) - 1) if len(reps) > 1 else 0.0) for i, name in enumerate(reps)}
    groups = find_approximation_groups(fused)

    def work(g):
        return _decide(fused, g, cfg, min(depth[x] for x in g.names), shapes)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            decisions = list(pool.map(work, groups))
    else:
        decisions = [work(g) for g in groups]

    out, produced = _rewrite(fused, decisions)
    cost_out = model_cost(out)

    layers: list[dict] = []
    for ev in events:
        for name in ev.removed:
            layers.append({"name": name, "action": "fused", "into": ev.target, "pattern": ev.pattern,
                           "kind": None, "b": None, "A": None, "R": None, "S": None,
                           "flops_before": None, "flops_after": None})
    by_name = {node.name: d for d in _flatten_decisions(decisions) for node in d.group.members}
    for name in reps:
        layers.append(_record(by_name[name], fused.node(name), shapes, produced))

    totals = {
        "flops_before": cost_in.total_flops,
        "flops_after_lossless": cost_fused.total_flops,
        "flops_after": cost_out.total_flops,
        "flop_reduction_ratio": cost_in.total_flops / cost_out.total_flops if cost_out.total_flops else None,
        "representation_flops_before": cost_in.representation_flops,
        "representation_flops_after": cost_out.representation_flops,
        "weight_bytes_before": cost_in.weight_bytes,
        "weight_bytes_after": cost_out.weight_bytes,
        "activation_bytes_before": cost_in.activation_bytes,
        "activation_bytes_after": cost_out.activation_bytes,
        "nodes_before": len(m.nodes),
        "nodes_after": len(out.nodes),
    }
    return out, OptimizationReport(cfg.to_json(), totals, layers)
