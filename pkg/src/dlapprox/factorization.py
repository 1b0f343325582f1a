"""Low-rank SVD replacements for a single representation layer.

Every builder maps one layer to a short sequence of layers whose composed
weight is the rank-``b`` truncation of some flattening of the original
weight tensor:

* filter-wise       ``k x k (b)``  then ``1 x 1 (c_o)``
* projection-first  ``1 x 1 (b)``  then ``k x k (c_o)``
* separable         ``1 x k_w (b)`` then ``k_h x 1 (c_o)``
* per-channel       grouped ``k x k (b*c_i, g=c_i)`` then ``1 x 1 (c_o)``

The original bias always moves to the last layer of the sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import CandidateRejected, CandidateSkipped, InvalidArgument, NotApplicable
from .flops import layer_flops
from .model_ir import ConvParams, LayerKind, Model, Shape, infer_node_shape, infer_shapes
from .tensor_core import Scheme, explained_variation, flatten, svd, truncate

FILTER_WISE = "FilterWise"
PROJECTION_FIRST = "ProjectionFirst"
SEPARABLE = "Separable"
PER_CHANNEL = "PerChannel"
SINGLE_KINDS = (FILTER_WISE, PROJECTION_FIRST, SEPARABLE, PER_CHANNEL)
CHAIN_INNER_KINDS = (FILTER_WISE, PROJECTION_FIRST)


@dataclass(frozen=True, eq=False)
class LayerSpec:
    kind: LayerKind
    params: ConvParams
    weight: np.ndarray
    bias: np.ndarray | None = None

    @property
    def intermediate_channels(self) -> int:
        return self.params.c_o


@dataclass(frozen=True, eq=False)
class Layer:
    """A representation layer with its weights and input activation shape."""

    name: str
    kind: LayerKind
    params: ConvParams
    weight: np.ndarray
    bias: np.ndarray | None
    in_shape: Shape

    @classmethod
    def from_model(cls, m: Model, name: str, shapes=None) -> "Layer":
        node = m.node(name)
        if not node.is_representation:
            raise InvalidArgument(f"'{name}' is not a representation layer")
        shapes = infer_shapes(m) if shapes is None else shapes
        return cls(name, node.kind, node.params, m.weight(node), m.bias_of(node), shapes[node.inputs[0]])

    @property
    def out_shape(self) -> Shape:
        return infer_node_shape(self.kind, self.params, [self.in_shape])

    @property
    def flops(self) -> int:
        return layer_flops(self.kind, self.params, self.in_shape)

    @property
    def weight4(self) -> np.ndarray:
        return np.asarray(self.weight, dtype=np.float32).reshape(self.params.weight_dims(self.kind))


@dataclass(eq=False)
class FactorizationCandidate:
    kind: str
    b: tuple[int, ...]
    replacement: tuple[LayerSpec, ...]
    accuracy: float
    flops_before: int
    flops_after: int
    score: float = math.nan

    @property
    def runtime(self) -> float:
        """FLOP reduction ``1 - new/original`` clamped to ``[0, 1)``."""
        if self.flops_before <= 0:
            return 0.0
        r = 1.0 - self.flops_after / self.flops_before
        return min(max(r, 0.0), math.nextafter(1.0, 0.0))

    @property
    def flop_ratio(self) -> float:
        return self.flops_before / self.flops_after if self.flops_after else math.inf

    @property
    def intermediate_channels(self) -> list[int]:
        return [s.params.c_o for s in self.replacement[:-1]]

    def sort_key(self):
        return (-self.score, self.flops_after, self.kind, self.b)


def _propagate(layer: Layer, specs) -> tuple[int, Shape]:
    shape = layer.in_shape
    total = 0
    for s in specs:
        total += layer_flops(s.kind, s.params, shape)
        shape = infer_node_shape(s.kind, s.params, [shape])
    return total, shape


def _finish(layer: Layer, kind: str, b, specs, accuracy: float, require_reduction: bool) -> FactorizationCandidate:
    after, out = _propagate(layer, specs)
    if out != layer.out_shape:
        raise AssertionError(f"{kind} replacement changes output shape {layer.out_shape} -> {out}")
    before = layer.flops
    if require_reduction and not after < before:
        raise CandidateRejected(f"{kind} at b={b} needs {after} FLOPs vs {before}")
    b = tuple(b) if isinstance(b, (tuple, list)) else (int(b),)
    return FactorizationCandidate(kind, b, tuple(specs), float(accuracy), before, after)


def _require_ungrouped(layer: Layer, kind: str, allowed=(LayerKind.CONVOLUTION, LayerKind.DECONVOLUTION, LayerKind.FULLY_CONNECTED)):
    if layer.kind not in allowed:
        raise NotApplicable(f"{kind} does not apply to {layer.kind.value}")
    if layer.params.g != 1:
        raise NotApplicable(f"{kind} skips grouped layers (g={layer.params.g})")


def _check_b(b, max_rank, kind):
    if not isinstance(b, (int, np.integer)) or not 1 <= b <= max_rank:
        raise InvalidArgument(f"{kind}: rank {b} outside [1, {max_rank}]")


def max_rank(layer: Layer, kind: str) -> int:
    co, ci, kh, kw = layer.weight4.shape
    return {
        FILTER_WISE: min(co, ci * kh * kw),
        PROJECTION_FIRST: min(co * kh * kw, ci),
        SEPARABLE: min(co * kh, ci * kw),
        PER_CHANNEL: min(co, kh * kw),
    }[kind]


def _svd_for(layer: Layer, scheme: Scheme, svds: dict | None):
    if svds is not None and scheme in svds:
        return svds[scheme]
    r = svd(flatten(layer.weight4, scheme))
    if svds is not None:
        svds[scheme] = r
    return r


def _pointwise(kind_of_layer: LayerKind, c_o: int, c_i: int) -> tuple[LayerKind, ConvParams]:
    if kind_of_layer is LayerKind.FULLY_CONNECTED:
        return LayerKind.FULLY_CONNECTED, ConvParams(c_o, c_i)
    return LayerKind.CONVOLUTION, ConvParams(c_o, c_i)


def filter_wise(layer: Layer, b: int, *, require_reduction: bool = True, svds: dict | None = None) -> FactorizationCandidate:
    _require_ungrouped(layer, FILTER_WISE)
    _check_b(b, max_rank(layer, FILTER_WISE), FILTER_WISE)
    co, ci, kh, kw = layer.weight4.shape
    r = _svd_for(layer, Scheme.FILTER_WISE, svds)
    left, right = truncate(r, b)
    p = layer.params
    first = LayerSpec(layer.kind, replace(p, c_o=b), right.reshape(b, ci, kh, kw))
    k2, p2 = _pointwise(layer.kind, co, b)
    second = LayerSpec(k2, p2, left.reshape(co, b, 1, 1), layer.bias)
    return _finish(layer, FILTER_WISE, b, [first, second], explained_variation(r, b), require_reduction)


def projection_first(layer: Layer, b: int, *, require_reduction: bool = True, svds: dict | None = None) -> FactorizationCandidate:
    _require_ungrouped(layer, PROJECTION_FIRST)
    _check_b(b, max_rank(layer, PROJECTION_FIRST), PROJECTION_FIRST)
    co, ci, kh, kw = layer.weight4.shape
    r = _svd_for(layer, Scheme.PROJECTION_FIRST, svds)
    left, right = truncate(r, b)
    k1, p1 = _pointwise(layer.kind, b, ci)
    first = LayerSpec(k1, p1, right.reshape(b, ci, 1, 1))
    second_w = left.reshape(co, kh, kw, b).transpose(0, 3, 1, 2)
    if layer.kind is LayerKind.FULLY_CONNECTED:
        second = LayerSpec(LayerKind.FULLY_CONNECTED, ConvParams(co, b), second_w.copy(), layer.bias)
    else:
        second = LayerSpec(layer.kind, replace(layer.params, c_i=b), np.ascontiguousarray(second_w), layer.bias)
    return _finish(layer, PROJECTION_FIRST, b, [first, second], explained_variation(r, b), require_reduction)


def separable(layer: Layer, b: int, *, require_reduction: bool = True, svds: dict | None = None) -> FactorizationCandidate:
    _require_ungrouped(layer, SEPARABLE, allowed=(LayerKind.CONVOLUTION,))
    p = layer.params
    if p.k_h * p.k_w == 1:
        raise NotApplicable("separable factorization needs a spatial kernel")
    _check_b(b, max_rank(layer, SEPARABLE), SEPARABLE)
    co, ci, kh, kw = layer.weight4.shape
    r = _svd_for(layer, Scheme.SEPARABLE, svds)
    left, right = truncate(r, b)
    # horizontal pass first, then vertical
    first = LayerSpec(
        LayerKind.CONVOLUTION,
        ConvParams(b, ci, 1, kw, 1, p.s_w, 0, p.pad_w, 1),
        right.reshape(b, ci, 1, kw),
    )
    second = LayerSpec(
        LayerKind.CONVOLUTION,
        ConvParams(co, b, kh, 1, p.s_h, 1, p.pad_h, 0, 1),
        np.ascontiguousarray(left.reshape(co, kh, b).transpose(0, 2, 1)[..., None]),
        layer.bias,
    )
    return _finish(layer, SEPARABLE, b, [first, second], explained_variation(r, b), require_reduction)


def per_channel(layer: Layer, b: int, *, require_reduction: bool = True, svds: dict | None = None) -> FactorizationCandidate:
    _require_ungrouped(layer, PER_CHANNEL, allowed=(LayerKind.CONVOLUTION,))
    _check_b(b, max_rank(layer, PER_CHANNEL), PER_CHANNEL)
    w = layer.weight4
    co, ci, kh, kw = w.shape
    if svds is not None and Scheme.PER_CHANNEL_SLICE in svds:
        slices = svds[Scheme.PER_CHANNEL_SLICE]
    else:
        slices = [svd(flatten(w, Scheme.PER_CHANNEL_SLICE, channel=i)) for i in range(ci)]
        if svds is not None:
            svds[Scheme.PER_CHANNEL_SLICE] = slices
    w1 = np.zeros((b * ci, 1, kh, kw), dtype=np.float32)
    w2 = np.zeros((co, b * ci, 1, 1), dtype=np.float32)
    scores = []
    for i, r in enumerate(slices):
        left, right = truncate(r, b)
        w1[i * b:(i + 1) * b, 0] = right.reshape(b, kh, kw)
        w2[:, i * b:(i + 1) * b, 0, 0] = left
        scores.append(explained_variation(r, b))
    p = layer.params
    first = LayerSpec(LayerKind.CONVOLUTION, replace(p, c_o=b * ci, g=ci), w1)
    second = LayerSpec(LayerKind.CONVOLUTION, ConvParams(co, b * ci), w2, layer.bias)
    return _finish(layer, PER_CHANNEL, b, [first, second], float(np.mean(scores)), require_reduction)


BUILDERS = {
    FILTER_WISE: filter_wise,
    PROJECTION_FIRST: projection_first,
    SEPARABLE: separable,
    PER_CHANNEL: per_channel,
}


def applicable(layer: Layer, kind: str) -> bool:
    try:
        if kind in (SEPARABLE, PER_CHANNEL):
            _require_ungrouped(layer, kind, allowed=(LayerKind.CONVOLUTION,))
            if kind == SEPARABLE and layer.params.k_h * layer.params.k_w == 1:
                return False
        else:
            _require_ungrouped(layer, kind)
    except NotApplicable:
        return False
    return True


def chain_kind(outer: str, inner: str) -> str:
    return f"Chain({outer},{inner})"


def _spatial_index(specs) -> int:
    hits = [
        i for i, s in enumerate(specs)
        if s.params.k_h * s.params.k_w > 1 and s.params.g == 1 and s.kind is not LayerKind.FULLY_CONNECTED
    ]
    if len(hits) != 1:
        raise NotApplicable("inner factorization has no unique spatial layer to refactor")
    return hits[0]


def chain_sublayer(layer: Layer, inner: str, b2: int, *, svds: dict | None = None,
                   inner_candidate: FactorizationCandidate | None = None):
    """Inner candidate, index of its spatial factor, and that factor as a ``Layer``."""
    first = inner_candidate or BUILDERS[inner](layer, b2, require_reduction=False, svds=svds)
    idx = _spatial_index(first.replacement)
    in_shape = layer.in_shape
    for s in first.replacement[:idx]:
        in_shape = infer_node_shape(s.kind, s.params, [in_shape])
    spec = first.replacement[idx]
    return first, idx, Layer(f"{layer.name}#sub", spec.kind, spec.params, spec.weight, spec.bias, in_shape)


def chain(layer: Layer, outer: str, b1: int, inner: str, b2: int, *, require_reduction: bool = True,
          svds: dict | None = None, inner_candidate: FactorizationCandidate | None = None,
          sub_svds: dict | None = None) -> FactorizationCandidate:
    """Apply ``inner`` at rank ``b2`` then ``outer`` at rank ``b1`` on its spatial factor.

    Filter-wise inner with projection-first outer gives
    ``(b1, c_i, 1, 1) -> (b2, b1, k_h, k_w) -> (c_o, b2, 1, 1)``.
    """
    if inner not in CHAIN_INNER_KINDS or outer not in BUILDERS:
        raise NotApplicable(f"unsupported chain {outer} on {inner}")
    first, idx, sub = chain_sublayer(layer, inner, b2, svds=svds, inner_candidate=inner_candidate)
    if not applicable(sub, outer):
        raise NotApplicable(f"{outer} does not apply to the spatial factor of {inner}")
    second = BUILDERS[outer](sub, b1, require_reduction=require_reduction, svds=sub_svds)
    specs = list(first.replacement[:idx]) + list(second.replacement) + list(first.replacement[idx + 1:])
    return _finish(layer, chain_kind(outer, inner), (b1, b2), specs, first.accuracy * second.accuracy, require_reduction)


# --- enumeration -----------------------------------------------------------

def is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def rank_grid(limit: int, spec: str = "pow2") -> list[int]:
    """Candidate ranks in ``[1, limit]``.

    ``"pow2"``: powers of two below ``limit`` plus ``limit``;
    ``"all"``: every rank; ``"step:N"``: 1, multiples of N, and ``limit``.
    """
    if limit < 1:
        return []
    if spec == "all":
        return list(range(1, limit + 1))
    if spec == "pow2":
        out = {limit}
        v = 1
        while v < limit:
            out.add(v)
            v *= 2
        return sorted(out)
    if spec.startswith("step:"):
        step = int(spec.split(":", 1)[1])
        if step < 1:
            raise InvalidArgument(f"bad rank grid step {step}")
        return sorted({1, limit, *range(step, limit + 1, step)})
    raise InvalidArgument(f"unknown rank grid '{spec}'")


@dataclass(frozen=True)
class SearchOptions:
    p: float = 0.5
    target: str = "cpu"
    rank_grid: str = "pow2"
    max_chain: int = 2


def _gpu_ok(c: FactorizationCandidate) -> bool:
    return all(is_power_of_two(n) for n in c.intermediate_channels)


def enumerate_candidates(layer: Layer, opts: SearchOptions = SearchOptions()) -> list[FactorizationCandidate]:
    """All FLOP-reducing candidates for ``layer``, best score first."""
    if opts.target not in ("cpu", "gpu"):
        raise InvalidArgument(f"unknown target '{opts.target}'")
    out: list[FactorizationCandidate] = []
    svds: dict = {}
    if opts.max_chain >= 1:
        for kind in SINGLE_KINDS:
            if not applicable(layer, kind):
                continue
            for b in rank_grid(max_rank(layer, kind), opts.rank_grid):
                try:
                    out.append(BUILDERS[kind](layer, b, svds=svds))
                except CandidateSkipped:
                    pass
    if opts.max_chain >= 2:
        for inner in CHAIN_INNER_KINDS:
            if not applicable(layer, inner):
                continue
            for b2 in rank_grid(max_rank(layer, inner), opts.rank_grid):
                try:
                    first, _, sub = chain_sublayer(layer, inner, b2, svds=svds)
                except NotApplicable:
                    continue
                sub_svds: dict = {}
                for outer in SINGLE_KINDS:
                    if not applicable(sub, outer):
                        continue
                    for b1 in rank_grid(max_rank(sub, outer), opts.rank_grid):
                        try:
                            out.append(chain(layer, outer, b1, inner, b2, inner_candidate=first, sub_svds=sub_svds))
                        except CandidateSkipped:
                            pass
    if opts.target == "gpu":
        out = [c for c in out if _gpu_ok(c)]
    for c in out:
        c.score = opts.p * c.accuracy + (1.0 - opts.p) * c.runtime
    out.sort(key=FactorizationCandidate.sort_key)
    return out


def compose_weight(c: FactorizationCandidate, layer: Layer) -> np.ndarray:
    """Effective ``(c_o, c_i, k_h, k_w)`` weight of a two-layer candidate."""
    co, ci, kh, kw = layer.weight4.shape
    first, second = c.replacement
    w1 = first.weight.astype(np.float64)
    w2 = second.weight.astype(np.float64)
    if c.kind == FILTER_WISE:
        return np.tensordot(w2.reshape(co, -1), w1, axes=(1, 0))
    if c.kind == PROJECTION_FIRST:
        return np.einsum("omyx,mi->oiyx", w2, w1.reshape(w1.shape[0], ci))
    if c.kind == SEPARABLE:
        return np.einsum("omy,mix->oiyx", w2[..., 0], w1[:, :, 0, :])
    if c.kind == PER_CHANNEL:
        b = c.b[0]
        out = np.zeros((co, ci, kh, kw))
        for i in range(ci):
            out[:, i] = np.tensordot(w2[:, i * b:(i + 1) * b, 0, 0], w1[i * b:(i + 1) * b, 0], axes=(1, 0))
        return out
    raise InvalidArgument(f"no closed-form recomposition for {c.kind}")
