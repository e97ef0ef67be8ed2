"""Binary network checkpoints.

Layout (all integers little-endian; see docs/checkpoint_format.md)::

    b"RDLK"                   magic
    u32 version               currently 1
    u32 layer_count
    u32 input_ndim, u32 dims[input_ndim]
    per layer:
        u32 kind_tag          index into nn.LAYER_KINDS
        u32 kernel, u32 stride, u32 features
        f64 dropout_p
        u32 tap_len, utf-8 tap name (empty when the layer has no tap)
        u32 param_count
        per parameter (sorted by name):
            u32 name_len, utf-8 name
            u32 ndim, u32 dims[ndim]
            f64 data[prod(dims)]   row-major
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .nn import LAYER_KINDS, LayerSpec, Network

MAGIC = b"RDLK"
VERSION = 1


def _u32(fh, *values):
    fh.write(struct.pack(f"<{len(values)}I", *values))


def _string(fh, s: str):
    b = s.encode("utf-8")
    _u32(fh, len(b))
    fh.write(b)


def dumps(net: Network) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    _u32(fh, VERSION, len(net.layers), len(net.input_shape), *net.input_shape)
    for layer in net.layers:
        spec = layer.spec
        _u32(fh, LAYER_KINDS.index(spec.kind), spec.kernel, spec.stride, spec.features)
        fh.write(struct.pack("<d", spec.dropout_p))
        _string(fh, spec.tap or "")
        _u32(fh, len(layer.params))
        for name in sorted(layer.params):
            p = layer.params[name]
            _string(fh, name)
            _u32(fh, p.ndim, *p.shape)
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return fh.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def loads(raw: bytes) -> Network:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an RDLK checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    n_layers = r.u32()
    ndim = r.u32()
    if ndim == 0:
        raise CheckpointError("checkpoint declares a zero-dimensional input")
    input_shape = tuple(r.u32(ndim)) if ndim > 1 else (r.u32(),)
    specs, params = [], []
    for _ in range(n_layers):
        kind, kernel, stride, features = r.u32(4)
        if kind >= len(LAYER_KINDS):
            raise CheckpointError(f"unknown layer kind tag {kind}")
        (p,) = struct.unpack("<d", r.take(8))
        tap = r.string() or None
        specs.append(LayerSpec(LAYER_KINDS[kind], kernel, stride, features, p, tap))
        layer_params = {}
        for _ in range(r.u32()):
            name = r.string()
            nd = r.u32()
            shape = tuple(r.u32(nd)) if nd > 1 else ((r.u32(),) if nd == 1 else ())
            count = int(np.prod(shape))
            layer_params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        params.append(layer_params)
    if r.pos != len(raw):
        raise CheckpointError("trailing bytes after checkpoint")
    net = Network(specs, input_shape, seed=None)
    for layer, lp in zip(net.layers, params):
        if set(lp) != set(layer.params):
            raise CheckpointError(f"parameter names {sorted(lp)} do not match layer {layer.kind}")
        for name, arr in lp.items():
            if arr.shape != layer.params[name].shape:
                raise CheckpointError(f"{layer.kind}.{name}: stored shape {arr.shape} vs expected {layer.params[name].shape}")
        layer.params = lp
    return net


def save(net: Network, path) -> None:
    Path(path).write_bytes(dumps(net))


def load(path) -> Network:
    return loads(Path(path).read_bytes())
