"""Manifest (JSON) and weights blob (``DLAW``) reading and writing.

Blob layout, little-endian, no padding::

    b"DLAW" | u32 version | u32 count |
    count x ( u16 name_len | name utf-8 | u8 ndim | ndim x u32 dims | prod(dims) x f32 )
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    DanglingTensorRef,
    InvalidArgument,
    MagicMismatch,
    ManifestError,
    TruncatedBlob,
    VersionMismatch,
)
from .model_ir import (
    BatchNormParams,
    ConvParams,
    LayerKind,
    Model,
    Node,
    PoolParams,
    ScaleParams,
)

MAGIC = b"DLAW"
BLOB_VERSION = 1
MANIFEST_VERSION = 1

_CONV_FIELDS = ("c_o", "c_i", "k_h", "k_w", "s_h", "s_w", "pad_h", "pad_w", "g")
_POOL_FIELDS = ("mode", "k_h", "k_w", "s_h", "s_w", "pad_h", "pad_w")


def encode_tensors(tensors) -> bytes:
    """Serialize ``name -> array`` in ascending name order."""
    out = bytearray(MAGIC)
    out += struct.pack("<II", BLOB_VERSION, len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float32)
        if not 1 <= arr.ndim <= 4:
            raise InvalidArgument(f"tensor '{name}' has unsupported ndim {arr.ndim}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise InvalidArgument(f"tensor name too long: {name[:40]}...")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedBlob(f"blob truncated while reading {what}", offset=pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise MagicMismatch("bad magic, expected b'DLAW'", offset=0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != BLOB_VERSION:
        raise VersionMismatch(f"unsupported blob version {version}", offset=4)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(nlen, "tensor name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ManifestError("tensor name is not valid UTF-8", offset=start + 2) from exc
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        if not 1 <= ndim <= 4:
            raise ManifestError(f"tensor ndim {ndim} outside 1..4", offset=pos - 1, name=name)
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"dims of '{name}'"))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * n, f"data of '{name}'"), dtype="<f4").astype(np.float32)
        if name in tensors:
            raise ManifestError("duplicate tensor name in blob", offset=start, name=name)
        tensors[name] = data.reshape(dims)
    if pos != len(view):
        raise ManifestError(f"{len(view) - pos} trailing bytes after last tensor", offset=pos)
    return tensors


def _floats(values):
    # float32 -> float64 is exact, and repr round-trips float64
    return [float(v) for v in np.asarray(values, dtype=np.float32)]


def _params_to_json(node: Node):
    p = node.params
    if isinstance(p, ConvParams):
        return {k: getattr(p, k) for k in _CONV_FIELDS}
    if isinstance(p, BatchNormParams):
        return {"mu": _floats(p.mu), "var": _floats(p.var), "eps": p.eps}
    if isinstance(p, ScaleParams):
        return {"alpha": _floats(p.alpha), "beta": _floats(p.beta)}
    if isinstance(p, PoolParams):
        return {k: getattr(p, k) for k in _POOL_FIELDS}
    return {}


def _params_from_json(kind: LayerKind, raw: dict, name: str):
    try:
        if kind in (LayerKind.CONVOLUTION, LayerKind.DECONVOLUTION, LayerKind.FULLY_CONNECTED):
            for required in ("c_o", "c_i"):
                if required not in raw:
                    raise KeyError(required)
            return ConvParams(**{k: int(raw.get(k, _conv_default(k))) for k in _CONV_FIELDS})
        if kind is LayerKind.BATCH_NORM:
            return BatchNormParams(raw["mu"], raw["var"], float(raw.get("eps", 1e-5)))
        if kind is LayerKind.SCALE:
            return ScaleParams(raw["alpha"], raw["beta"])
        if kind is LayerKind.POOLING:
            defaults = PoolParams()
            kw = {k: raw.get(k, getattr(defaults, k)) for k in _POOL_FIELDS}
            return PoolParams(**{k: (v if k == "mode" else int(v)) for k, v in kw.items()})
        return None
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"bad params: {exc!r}", name=name) from exc


def _conv_default(field_name):
    return 1 if field_name in ("k_h", "k_w", "s_h", "s_w", "g") else 0


def encode_manifest(m: Model) -> bytes:
    nodes = []
    for n in m.nodes:
        entry = {
            "name": n.name,
            "kind": n.kind.value,
            "params": _params_to_json(n),
            "inputs": list(n.inputs),
            "output": n.output,
        }
        if n.weights is not None:
            entry["weights"] = n.weights
        if n.bias is not None:
            entry["bias"] = n.bias
        nodes.append(entry)
    c, h, w = m.input_shape
    doc = {"version": MANIFEST_VERSION, "input": {"c": c, "h": h, "w": w}, "nodes": nodes}
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")


def decode_manifest(manifest: bytes) -> tuple[tuple[int, int, int], list[Node]]:
    try:
        doc = json.loads(manifest.decode("utf-8") if isinstance(manifest, (bytes, bytearray)) else manifest)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"manifest is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    if doc.get("version") != MANIFEST_VERSION:
        raise VersionMismatch(f"unsupported manifest version {doc.get('version')!r}")
    try:
        inp = doc["input"]
        input_shape = (int(inp["c"]), int(inp["h"]), int(inp["w"]))
        raw_nodes = doc["nodes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"missing or malformed top-level field: {exc!r}") from exc
    if not isinstance(raw_nodes, list):
        raise ManifestError("'nodes' must be an array")
    nodes = []
    for i, raw in enumerate(raw_nodes):
        if not isinstance(raw, dict) or "name" not in raw:
            raise ManifestError(f"node #{i} has no name")
        name = raw["name"]
        try:
            kind = LayerKind(raw["kind"])
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"unknown or missing kind {raw.get('kind')!r}", name=name) from exc
        inputs = raw.get("inputs", [])
        output = raw.get("output")
        if not isinstance(inputs, list) or not all(isinstance(e, str) for e in inputs) or not isinstance(output, str):
            raise ManifestError("node needs 'inputs' (array of strings) and 'output' (string)", name=name)
        params = _params_from_json(kind, raw.get("params", {}) or {}, name)
        nodes.append(Node(name, kind, tuple(inputs), output, params, raw.get("weights"), raw.get("bias")))
    return input_shape, nodes


def load_model(manifest: bytes, weights: bytes) -> Model:
    input_shape, nodes = decode_manifest(manifest)
    tensors = decode_tensors(weights)
    for n in nodes:
        for ref in (n.weights, n.bias):
            if ref is not None and ref not in tensors:
                raise DanglingTensorRef(f"node '{n.name}' references missing tensor", name=ref)
    return Model(input_shape, nodes, tensors)


def save_model(m: Model) -> tuple[bytes, bytes]:
    return encode_manifest(m), encode_tensors(dict(m.tensors))


def read_model(model_path, weights_path) -> Model:
    return load_model(Path(model_path).read_bytes(), Path(weights_path).read_bytes())


def write_model(m: Model, model_path, weights_path) -> None:
    manifest, blob = save_model(m)
    Path(model_path).write_bytes(manifest)
    Path(weights_path).write_bytes(blob)
