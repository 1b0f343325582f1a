"""Lossless rewrites: batchnorm/scale folding and linear-layer merging."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .flops import layer_flops
from .model_ir import (
    BatchNormParams,
    LayerKind,
    Model,
    Node,
    ScaleParams,
    Violation,
    ensure_valid,
    infer_shapes,
    topo_order,
)


def _affine(bn: BatchNormParams | None, sc: ScaleParams | None, channels: int):
    """Collapse ``scale(bn(x))`` into ``a*x + c`` (float64)."""
    mu = np.zeros(channels) if bn is None else bn.mu.astype(np.float64)
    sigma = np.ones(channels) if bn is None else bn.sigma()
    alpha = np.ones(channels) if sc is None else sc.alpha.astype(np.float64)
    beta = np.zeros(channels) if sc is None else sc.beta.astype(np.float64)
    for p in (bn, sc):
        if p is not None and p.channels != channels:
            raise ValidationError([Violation(None, "channels", f"{p.channels} per-channel parameters for {channels} channels")])
    a = alpha / sigma
    return a, beta - a * mu


def fuse_bn_scale_after(weight, bias, bn: BatchNormParams | None = None, sc: ScaleParams | None = None):
    """Fold ``scale(bn(W x + b))`` into ``W' x + b'``.

    ``W'[o] = alpha_o W[o] / sigma_o`` and
    ``b'_o = alpha_o (b_o - mu_o) / sigma_o + beta_o``.
    """
    if bn is None and sc is None:
        raise ValueError("need a batchnorm or a scale to fold")
    w = np.asarray(weight, dtype=np.float64)
    co = w.shape[0]
    b = np.zeros(co) if bias is None else np.asarray(bias, dtype=np.float64)
    a, c = _affine(bn, sc, co)
    w_new = w * a.reshape((co,) + (1,) * (w.ndim - 1))
    return w_new.astype(np.float32), (a * b + c).astype(np.float32)


def fuse_bn_scale_before(weight, bias, bn: BatchNormParams | None = None, sc: ScaleParams | None = None,
                         in_channels: int | None = None):
    """Fold an input-side ``a*x + c`` into a pad-0, ungrouped layer.

    ``weight`` is ``(c_o, c_i, k_h, k_w)``.  For a fully-connected layer
    whose ``c_i`` is a flattened ``(c, h, w)`` input, pass ``in_channels=c``.
    """
    if bn is None and sc is None:
        raise ValueError("need a batchnorm or a scale to fold")
    w = np.asarray(weight, dtype=np.float64)
    co, ci = w.shape[0], w.shape[1]
    channels = ci if in_channels is None else in_channels
    a, c = _affine(bn, sc, channels)
    if channels != ci:
        a = np.repeat(a, ci // channels)
        c = np.repeat(c, ci // channels)
    b = np.zeros(co) if bias is None else np.asarray(bias, dtype=np.float64)
    b_new = b + np.einsum("oik,i->o", w.reshape(co, ci, -1), c)
    w_new = w * a.reshape((1, ci) + (1,) * (w.ndim - 2))
    return w_new.astype(np.float32), b_new.astype(np.float32)


def fuse_adjacent_representation(w1, b1, w2, b2):
    """Compose ``W2 (W1 x + b1) + b2`` where ``W2`` is pointwise."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2m = np.asarray(w2, dtype=np.float64).reshape(w2.shape[0], -1)
    mid = w1.shape[0]
    if w2m.shape[1] != mid:
        raise ValueError(f"inner dimensions disagree: {w2m.shape[1]} vs {mid}")
    b1 = np.zeros(mid) if b1 is None else np.asarray(b1, dtype=np.float64)
    b2 = np.zeros(w2m.shape[0]) if b2 is None else np.asarray(b2, dtype=np.float64)
    w_new = np.tensordot(w2m, w1, axes=(1, 0))
    return w_new.astype(np.float32), (w2m @ b1 + b2).astype(np.float32)


@dataclass(frozen=True)
class FusionEvent:
    pattern: str
    target: str
    removed: tuple[str, ...]


class _Rewriter:
    def __init__(self, m: Model):
        self.m = m
        self.consumers = m.consumers()
        self.producers = m.producers()
        self.terminal = set(m.terminal_edges())

    def sole_consumer(self, edge: str) -> Node | None:
        users = self.consumers.get(edge, [])
        if len(users) == 1 and edge not in self.terminal:
            return users[0]
        return None

    def commit(self, updates: dict[str, Node], removed: set[str], new_tensors: dict[str, np.ndarray]) -> Model:
        tensors = dict(self.m.tensors)
        tensors.update(new_tensors)
        nodes = [updates.get(n.name, n) for n in self.m.nodes if n.name not in removed]
        return self.m.with_nodes(nodes, tensors)


def _tensor_names(m: Model, node: Node, removed: set[str], need_bias: bool):
    """Tensor names for ``node``'s rewritten parameters, never clobbering
    tensors still used by other surviving nodes."""
    others = {
        r for n in m.nodes if n.name != node.name and n.name not in removed
        for r in (n.weights, n.bias) if r is not None
    }

    def pick(base):
        name, i = base, 1
        while name in others:
            name, i = f"{base}_{i}", i + 1
        return name

    w_name = pick(node.weights or f"{node.name}_w")
    b_name = pick(node.bias or f"{node.name}_b") if need_bias else None
    return w_name, b_name


def _fold_after_once(m: Model):
    rw = _Rewriter(m)
    for rep in topo_order(m):
        if not rep.is_representation:
            continue
        first = rw.sole_consumer(rep.output)
        if first is None or first.kind not in (LayerKind.BATCH_NORM, LayerKind.SCALE):
            continue
        chain = [first]
        if first.kind is LayerKind.BATCH_NORM:
            nxt = rw.sole_consumer(first.output)
            if nxt is not None and nxt.kind is LayerKind.SCALE:
                chain.append(nxt)
        bn = next((n.params for n in chain if n.kind is LayerKind.BATCH_NORM), None)
        sc = next((n.params for n in chain if n.kind is LayerKind.SCALE), None)
        w, b = fuse_bn_scale_after(m.weight(rep), m.bias_of(rep), bn, sc)
        removed = {n.name for n in chain}
        w_name, b_name = _tensor_names(m, rep, removed, True)
        new = replace(rep, output=chain[-1].output, weights=w_name, bias=b_name)
        model = rw.commit({rep.name: new}, removed, {w_name: w, b_name: b})
        return model, FusionEvent("bn-scale-after", rep.name, tuple(n.name for n in chain))
    return None


def _fold_before_once(m: Model):
    rw = _Rewriter(m)
    shapes = infer_shapes(m)
    for rep in topo_order(m):
        if rep.kind not in (LayerKind.CONVOLUTION, LayerKind.FULLY_CONNECTED):
            continue
        p = rep.params
        if p.g != 1 or p.pad_h or p.pad_w:
            continue
        last = rw.producers.get(rep.inputs[0])
        if last is None or last.kind not in (LayerKind.BATCH_NORM, LayerKind.SCALE):
            continue
        if rw.sole_consumer(last.output) is not rep:
            continue
        chain = [last]
        if last.kind is LayerKind.SCALE:
            prev = rw.producers.get(last.inputs[0])
            if prev is not None and prev.kind is LayerKind.BATCH_NORM and rw.sole_consumer(prev.output) is last:
                chain.insert(0, prev)
        bn = next((n.params for n in chain if n.kind is LayerKind.BATCH_NORM), None)
        sc = next((n.params for n in chain if n.kind is LayerKind.SCALE), None)
        in_c = shapes[rep.inputs[0]][0]
        w, b = fuse_bn_scale_before(m.weight(rep), m.bias_of(rep), bn, sc, in_channels=in_c)
        removed = {n.name for n in chain}
        w_name, b_name = _tensor_names(m, rep, removed, True)
        new = replace(rep, inputs=(chain[0].inputs[0],), weights=w_name, bias=b_name)
        model = rw.commit({rep.name: new}, removed, {w_name: w.reshape(m.weight(rep).shape), b_name: b})
        return model, FusionEvent("bn-scale-before", rep.name, tuple(n.name for n in chain))
    return None


def _mergeable(first: Node, second: Node) -> bool:
    if first.kind is LayerKind.FULLY_CONNECTED:
        return second.kind is LayerKind.FULLY_CONNECTED
    if first.kind in (LayerKind.CONVOLUTION, LayerKind.DECONVOLUTION):
        return second.kind is LayerKind.CONVOLUTION and second.params.is_pointwise and first.params.g == 1
    return False


def _merge_adjacent_once(m: Model):
    rw = _Rewriter(m)
    shapes = infer_shapes(m)
    for first in topo_order(m):
        if not first.is_representation:
            continue
        second = rw.sole_consumer(first.output)
        if second is None or not second.is_representation or not _mergeable(first, second):
            continue
        merged_params = replace(first.params, c_o=second.params.c_o)
        before = layer_flops(first.kind, first.params, shapes[first.inputs[0]]) + layer_flops(
            second.kind, second.params, shapes[second.inputs[0]])
        after = layer_flops(first.kind, merged_params, shapes[first.inputs[0]])
        if after > before:
            continue
        w, b = fuse_adjacent_representation(m.weight(first), m.bias_of(first), m.weight(second), m.bias_of(second))
        removed = {second.name}
        w_name, b_name = _tensor_names(m, first, removed, True)
        new = replace(first, output=second.output, params=merged_params, weights=w_name, bias=b_name)
        model = rw.commit({first.name: new}, removed, {w_name: w, b_name: b})
        return model, FusionEvent("adjacent-representation", first.name, (second.name,))
    return None


def run_lossless_pass_logged(m: Model) -> tuple[Model, list[FusionEvent]]:
    ensure_valid(m)
    events: list[FusionEvent] = []
    while True:
        for step in (_fold_after_once, _fold_before_once, _merge_adjacent_once):
            hit = step(m)
            if hit is not None:
                m, event = hit
                events.append(event)
                break
        else:
            return m, events


def run_lossless_pass(m: Model) -> Model:
    """Apply every exact fusion until nothing changes."""
    return run_lossless_pass_logged(m)[0]
