"""Reference forward pass.

Activations are ``(c, h, w)`` arrays (batch fixed at 1).  Convolution is
cross-correlation.  Three independent convolution routes exist:

* :func:`conv2d` - direct loop over kernel offsets, used by :func:`forward`
* :func:`conv2d_matmul` - im2col + matrix product, a cross-check
* :func:`conv2d_naive` - scalar loops with an optional multiply counter,
  the FLOP-count oracle
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ComparisonError, ExecutionError, InvalidArgument
from .model_ir import (
    ConvParams,
    LayerKind,
    Model,
    conv_output_hw,
    deconv_output_hw,
    ensure_valid,
    topo_order,
)


@dataclass
class MultiplyCounter:
    count: int = 0


def _pad(x, pad_h, pad_w, value=0.0):
    if pad_h == 0 and pad_w == 0:
        return x
    return np.pad(x, ((0, 0), (pad_h, pad_h), (pad_w, pad_w)), constant_values=value)


def _add_bias(out, bias):
    if bias is not None:
        out += np.asarray(bias, dtype=out.dtype)[:, None, None]
    return out


def conv2d(x, w, bias, p: ConvParams, dtype=np.float32):
    x = np.asarray(x, dtype=dtype)
    w = np.asarray(w, dtype=dtype)
    c, h, wd = x.shape
    oh, ow = conv_output_hw(h, wd, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w)
    xp = _pad(x, p.pad_h, p.pad_w)
    out = np.zeros((p.c_o, oh, ow), dtype=dtype)
    cig, cog = p.c_i // p.g, p.c_o // p.g
    for gi in range(p.g):
        xs = xp[gi * cig:(gi + 1) * cig]
        wg = w[gi * cog:(gi + 1) * cog]
        acc = out[gi * cog:(gi + 1) * cog]
        for ky in range(p.k_h):
            for kx in range(p.k_w):
                patch = xs[:, ky:ky + p.s_h * (oh - 1) + 1:p.s_h, kx:kx + p.s_w * (ow - 1) + 1:p.s_w]
                acc += np.tensordot(wg[:, :, ky, kx], patch, axes=(1, 0))
    return _add_bias(out, bias)


def conv2d_matmul(x, w, bias, p: ConvParams, dtype=np.float32):
    x = np.asarray(x, dtype=dtype)
    w = np.asarray(w, dtype=dtype)
    c, h, wd = x.shape
    oh, ow = conv_output_hw(h, wd, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w)
    xp = _pad(x, p.pad_h, p.pad_w)
    cig, cog = p.c_i // p.g, p.c_o // p.g
    # row index: (channel, ky, kx); column index: output pixel
    ch, ky, kx = (a.reshape(-1, 1) for a in np.meshgrid(
        np.arange(cig), np.arange(p.k_h), np.arange(p.k_w), indexing="ij"))
    oy = np.repeat(np.arange(oh), ow)
    ox = np.tile(np.arange(ow), oh)
    rows_y = ky + p.s_h * oy[None, :]
    rows_x = kx + p.s_w * ox[None, :]
    rows_c = ch
    outs = []
    for gi in range(p.g):
        cols = xp[gi * cig + rows_c, rows_y, rows_x]
        wmat = w[gi * cog:(gi + 1) * cog].reshape(cog, -1)
        outs.append(wmat @ cols)
    out = np.concatenate(outs, axis=0).reshape(p.c_o, oh, ow)
    return _add_bias(out, bias)


def conv2d_naive(x, w, bias, p: ConvParams, counter: MultiplyCounter | None = None):
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    c, h, wd = x.shape
    oh, ow = conv_output_hw(h, wd, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w)
    xp = _pad(x, p.pad_h, p.pad_w)
    cig, cog = p.c_i // p.g, p.c_o // p.g
    out = np.zeros((p.c_o, oh, ow), dtype=np.float32)
    n_mul = 0
    for o in range(p.c_o):
        gi = o // cog
        for y in range(oh):
            for xx in range(ow):
                acc = np.float32(0.0)
                for i in range(cig):
                    for ky in range(p.k_h):
                        for kx in range(p.k_w):
                            acc += w[o, i, ky, kx] * xp[gi * cig + i, y * p.s_h + ky, xx * p.s_w + kx]
                            n_mul += 1
                out[o, y, xx] = acc
    if counter is not None:
        counter.count += n_mul
    return _add_bias(out, bias)


def deconv2d(x, w, bias, p: ConvParams, dtype=np.float32):
    """Transposed convolution; weight dims ``(c_o, c_i/g, k_h, k_w)``."""
    x = np.asarray(x, dtype=dtype)
    w = np.asarray(w, dtype=dtype)
    c, h, wd = x.shape
    oh, ow = deconv_output_hw(h, wd, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w)
    full_h = (h - 1) * p.s_h + p.k_h
    full_w = (wd - 1) * p.s_w + p.k_w
    full = np.zeros((p.c_o, full_h, full_w), dtype=dtype)
    cig, cog = p.c_i // p.g, p.c_o // p.g
    for gi in range(p.g):
        xs = x[gi * cig:(gi + 1) * cig]
        wg = w[gi * cog:(gi + 1) * cog]
        acc = full[gi * cog:(gi + 1) * cog]
        for ky in range(p.k_h):
            for kx in range(p.k_w):
                acc[:, ky:ky + p.s_h * (h - 1) + 1:p.s_h, kx:kx + p.s_w * (wd - 1) + 1:p.s_w] += np.tensordot(
                    wg[:, :, ky, kx], xs, axes=(1, 0)
                )
    out = np.ascontiguousarray(full[:, p.pad_h:p.pad_h + oh, p.pad_w:p.pad_w + ow])
    return _add_bias(out, bias)


def deconv2d_naive(x, w, bias, p: ConvParams, counter: MultiplyCounter | None = None):
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    c, h, wd = x.shape
    oh, ow = deconv_output_hw(h, wd, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w)
    full = np.zeros((p.c_o, (h - 1) * p.s_h + p.k_h, (wd - 1) * p.s_w + p.k_w), dtype=np.float32)
    cig, cog = p.c_i // p.g, p.c_o // p.g
    n_mul = 0
    for o in range(p.c_o):
        gi = o // cog
        for i in range(cig):
            for y in range(h):
                for xx in range(wd):
                    v = x[gi * cig + i, y, xx]
                    for ky in range(p.k_h):
                        for kx in range(p.k_w):
                            full[o, y * p.s_h + ky, xx * p.s_w + kx] += w[o, i, ky, kx] * v
                            n_mul += 1
    if counter is not None:
        counter.count += n_mul
    out = np.ascontiguousarray(full[:, p.pad_h:p.pad_h + oh, p.pad_w:p.pad_w + ow])
    return _add_bias(out, bias)


def fully_connected(x, w, bias, p: ConvParams, dtype=np.float32):
    x = np.asarray(x, dtype=dtype).reshape(-1)
    wmat = np.asarray(w, dtype=dtype).reshape(p.c_o, p.c_i)
    out = (wmat @ x).reshape(p.c_o, 1, 1)
    return _add_bias(out, bias)


def fully_connected_naive(x, w, bias, p: ConvParams, counter: MultiplyCounter | None = None):
    x = np.asarray(x, dtype=np.float32).reshape(-1)
    wmat = np.asarray(w, dtype=np.float32).reshape(p.c_o, p.c_i)
    out = np.zeros((p.c_o, 1, 1), dtype=np.float32)
    n_mul = 0
    for o in range(p.c_o):
        acc = np.float32(0.0)
        for i in range(p.c_i):
            acc += wmat[o, i] * x[i]
            n_mul += 1
        out[o, 0, 0] = acc
    if counter is not None:
        counter.count += n_mul
    return _add_bias(out, bias)


def pool2d(x, p, dtype=np.float32):
    x = np.asarray(x, dtype=dtype)
    c, h, wd = x.shape
    oh, ow = conv_output_hw(h, wd, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w)
    is_max = p.mode == "max"
    xp = _pad(x, p.pad_h, p.pad_w, value=-np.inf if is_max else 0.0)
    out = np.full((c, oh, ow), -np.inf if is_max else 0.0, dtype=dtype)
    for ky in range(p.k_h):
        for kx in range(p.k_w):
            patch = xp[:, ky:ky + p.s_h * (oh - 1) + 1:p.s_h, kx:kx + p.s_w * (ow - 1) + 1:p.s_w]
            if is_max:
                np.maximum(out, patch, out=out)
            else:
                out += patch
    if not is_max:
        out /= dtype(p.k_h * p.k_w)
    return out


def run_node(node, inputs, weight, bias, dtype=np.float32):
    k = node.kind
    p = node.params
    if k is LayerKind.CONVOLUTION:
        return conv2d(inputs[0], weight, bias, p, dtype)
    if k is LayerKind.DECONVOLUTION:
        return deconv2d(inputs[0], weight, bias, p, dtype)
    if k is LayerKind.FULLY_CONNECTED:
        return fully_connected(inputs[0], weight, bias, p, dtype)
    x = np.asarray(inputs[0], dtype=dtype)
    if k is LayerKind.BATCH_NORM:
        sigma = np.sqrt(p.var.astype(dtype) + dtype(p.eps))
        return (x - p.mu.astype(dtype)[:, None, None]) / sigma[:, None, None]
    if k is LayerKind.SCALE:
        return p.alpha.astype(dtype)[:, None, None] * x + p.beta.astype(dtype)[:, None, None]
    if k is LayerKind.RELU:
        return np.maximum(x, dtype(0.0))
    if k is LayerKind.POOLING:
        return pool2d(x, p, dtype)
    if k is LayerKind.ELTWISE_ADD:
        out = x.copy()
        for other in inputs[1:]:
            out += np.asarray(other, dtype=dtype)
        return out
    raise ExecutionError(f"cannot execute kind {k.value}", node.name)


def forward(m: Model, x, *, float64: bool = False) -> dict[str, np.ndarray]:
    """Run ``m`` on one input; returns every edge's activation.

    ``x`` may be ``(c, h, w)`` or ``(1, c, h, w)``.  ``float64=True``
    switches accumulation to double precision for debugging.
    """
    ensure_valid(m)
    dtype = np.float64 if float64 else np.float32
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise InvalidArgument("batch dimension must be 1")
        x = x[0]
    if tuple(x.shape) != m.input_shape:
        raise ExecutionError(f"input shape {tuple(x.shape)} != declared {m.input_shape}")
    acts: dict[str, np.ndarray] = {}
    for n in topo_order(m):
        if n.kind is LayerKind.INPUT:
            acts[n.output] = x
            continue
        ins = [acts[e] for e in n.inputs]
        weight = m.tensors[n.weights] if n.weights is not None else None
        bias = m.tensors[n.bias] if n.bias is not None else None
        try:
            acts[n.output] = run_node(n, ins, weight, bias, dtype)
        except (ValueError, IndexError) as exc:
            raise ExecutionError(str(exc), n.name) from exc
    return acts


def random_inputs(shape, n_inputs: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(shape).astype(np.float32) for _ in range(n_inputs)]


def compare_models(m1: Model, m2: Model, n_inputs: int = 16, seed: int = 0) -> dict:
    """Max-abs and mean-relative output differences over seeded inputs."""
    if m1.input_shape != m2.input_shape:
        raise ComparisonError(f"input shapes differ: {m1.input_shape} vs {m2.input_shape}")
    outs1, outs2 = m1.terminal_edges(), m2.terminal_edges()
    if outs1 != outs2:
        raise ComparisonError(f"terminal edges differ: {outs1} vs {outs2}")
    per = {e: {"max_abs": 0.0, "rel": []} for e in outs1}
    for x in random_inputs(m1.input_shape, n_inputs, seed):
        a1, a2 = forward(m1, x), forward(m2, x)
        for e in outs1:
            ref = a1[e].astype(np.float64)
            diff = np.abs(ref - a2[e].astype(np.float64))
            per[e]["max_abs"] = max(per[e]["max_abs"], float(diff.max()) if diff.size else 0.0)
            denom = float(np.linalg.norm(ref))
            per[e]["rel"].append(float(np.linalg.norm(diff)) / denom if denom > 0 else float(np.linalg.norm(diff)))
    outputs = {
        e: {"max_abs": s["max_abs"], "mean_rel": float(np.mean(s["rel"])) if s["rel"] else 0.0}
        for e, s in per.items()
    }
    return {
        "n_inputs": n_inputs,
        "seed": seed,
        "max_abs": max((o["max_abs"] for o in outputs.values()), default=0.0),
        "mean_rel": float(np.mean([o["mean_rel"] for o in outputs.values()])) if outputs else 0.0,
        "outputs": outputs,
    }
