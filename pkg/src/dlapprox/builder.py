"""Convenience builder for constructing models in code."""
from __future__ import annotations

import numpy as np

from .model_ir import (
    BatchNormParams,
    ConvParams,
    LayerKind,
    Model,
    Node,
    PoolParams,
    ScaleParams,
    infer_node_shape,
)


class GraphBuilder:
    """Append-only model builder that tracks edge shapes as it goes.

    Weights not supplied explicitly are drawn from ``rng`` (standard
    normal scaled by ``1/sqrt(fan_in)``).  Every layer method returns the
    name of its output edge.
    """

    def __init__(self, c, h, w, *, seed=0, input_name="data"):
        self.input_shape = (c, h, w)
        self.rng = np.random.default_rng(seed)
        self.nodes: list[Node] = [Node(input_name, LayerKind.INPUT, (), input_name)]
        self.tensors: dict[str, np.ndarray] = {}
        self.shapes = {input_name: (c, h, w)}
        self.input = input_name

    def _add(self, node: Node) -> str:
        self.shapes[node.output] = infer_node_shape(node.kind, node.params, [self.shapes[e] for e in node.inputs])
        self.nodes.append(node)
        return node.output

    def _rep(self, kind, name, src, params, weight, bias, use_bias):
        dims = params.weight_dims(kind)
        if weight is None:
            fan_in = max(1, int(np.prod(dims[1:])))
            weight = self.rng.standard_normal(dims) / np.sqrt(fan_in)
        self.tensors[f"{name}_w"] = np.asarray(weight, dtype=np.float32).reshape(dims)
        bias_ref = None
        if bias is not None or use_bias:
            if bias is None:
                bias = 0.1 * self.rng.standard_normal(params.c_o)
            self.tensors[f"{name}_b"] = np.asarray(bias, dtype=np.float32).reshape(params.c_o)
            bias_ref = f"{name}_b"
        return self._add(Node(name, kind, (src,), name, params, f"{name}_w", bias_ref))

    def conv(self, name, src, c_o, k=3, *, k_w=None, stride=1, s_w=None, pad=0, pad_w=None, g=1,
             weight=None, bias=None, use_bias=True):
        c_i = self.shapes[src][0]
        p = ConvParams(c_o, c_i, k, k if k_w is None else k_w, stride, stride if s_w is None else s_w,
                       pad, pad if pad_w is None else pad_w, g)
        return self._rep(LayerKind.CONVOLUTION, name, src, p, weight, bias, use_bias)

    def deconv(self, name, src, c_o, k=3, *, stride=1, pad=0, g=1, weight=None, bias=None, use_bias=True):
        c_i = self.shapes[src][0]
        p = ConvParams(c_o, c_i, k, k, stride, stride, pad, pad, g)
        return self._rep(LayerKind.DECONVOLUTION, name, src, p, weight, bias, use_bias)

    def fc(self, name, src, c_o, *, weight=None, bias=None, use_bias=True):
        c, h, w = self.shapes[src]
        p = ConvParams(c_o, c * h * w)
        return self._rep(LayerKind.FULLY_CONNECTED, name, src, p, weight, bias, use_bias)

    def bn(self, name, src, *, mu=None, var=None, eps=1e-5):
        c = self.shapes[src][0]
        mu = 0.5 * self.rng.standard_normal(c) if mu is None else mu
        var = self.rng.uniform(0.5, 2.0, c) if var is None else var
        return self._add(Node(name, LayerKind.BATCH_NORM, (src,), name, BatchNormParams(mu, var, eps)))

    def scale(self, name, src, *, alpha=None, beta=None):
        c = self.shapes[src][0]
        alpha = self.rng.uniform(0.5, 1.5, c) if alpha is None else alpha
        beta = 0.2 * self.rng.standard_normal(c) if beta is None else beta
        return self._add(Node(name, LayerKind.SCALE, (src,), name, ScaleParams(alpha, beta)))

    def relu(self, name, src):
        return self._add(Node(name, LayerKind.RELU, (src,), name))

    def pool(self, name, src, *, mode="max", k=2, stride=2, pad=0):
        return self._add(Node(name, LayerKind.POOLING, (src,), name, PoolParams(mode, k, k, stride, stride, pad, pad)))

    def add(self, name, *srcs):
        return self._add(Node(name, LayerKind.ELTWISE_ADD, tuple(srcs), name))

    def build(self) -> Model:
        return Model(self.input_shape, self.nodes, self.tensors)
