"""Binary model checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes  b"EATM"
    version    uint16   (currently 1)
    dtype      uint8    1 = float32, 2 = float64
    in_ndim    uint8, then in_ndim x uint32 input shape
    n_layers   uint32, then per layer:
               uint8 kind, uint32 x 8 (in_features, out_features, in_channels,
               out_channels, kernel_size, stride, padding, window), uint8 bias
    n_weights  uint32, then per weight: uint8 ndim, ndim x uint32 shape
    payload    raw little-endian weight arrays, in layer order

Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError
from .model import LAYER_KINDS, LayerSpec, Model

MAGIC = b"EATM"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_LAYER = struct.Struct("<B8IB")


def to_bytes(model: Model) -> bytes:
    dtype = np.dtype(model.dtype)
    if dtype not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported weight dtype {dtype}")
    parts = [MAGIC, struct.pack("<HB", VERSION, _DTYPE_CODES[dtype])]
    parts.append(struct.pack("<B", len(model.input_shape)))
    parts.append(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    parts.append(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        parts.append(_LAYER.pack(
            LAYER_KINDS.index(layer.kind), layer.in_features, layer.out_features, layer.in_channels,
            layer.out_channels, layer.kernel_size, layer.stride, layer.padding, layer.window,
            int(layer.bias)))
    parts.append(struct.pack("<I", len(model.weights)))
    for w in model.weights:
        parts.append(struct.pack(f"<B{w.ndim}I", w.ndim, *w.shape))
    le = _DTYPES[_DTYPE_CODES[dtype]]
    for w in model.weights:
        parts.append(np.ascontiguousarray(w.data, dtype=le).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out


def from_bytes(buf: bytes) -> Model:
    if buf[:4] != MAGIC:
        raise CheckpointError("not an EATM checkpoint (bad magic bytes)")
    r = _Reader(buf)
    r.pos = 4
    version, code = r.take("<HB")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if code not in _DTYPES:
        raise CheckpointError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    (ndim,) = r.take("<B")
    input_shape = r.take(f"<{ndim}I")
    (n_layers,) = r.take("<I")
    layers = []
    for _ in range(n_layers):
        kind, *dims, bias = r.take(_LAYER.format)
        if kind >= len(LAYER_KINDS):
            raise CheckpointError(f"unknown layer kind code {kind}")
        names = ("in_features", "out_features", "in_channels", "out_channels",
                 "kernel_size", "stride", "padding", "window")
        layers.append(LayerSpec(LAYER_KINDS[kind], **dict(zip(names, dims)), bias=bool(bias)))
    (n_weights,) = r.take("<I")
    shapes = []
    for _ in range(n_weights):
        (wdim,) = r.take("<B")
        shapes.append(r.take(f"<{wdim}I"))
    weights = []
    for i, shape in enumerate(shapes):
        count = int(np.prod(shape))
        nbytes = count * dtype.itemsize
        if r.pos + nbytes > len(buf):
            raise CheckpointError(f"weight payload truncated at byte {r.pos}")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=r.pos).reshape(shape)
        r.pos += nbytes
        weights.append(Tensor(arr.astype(dtype.newbyteorder("="), copy=True), requires_grad=True,
                              name=f"w{i}"))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after weight payload")
    try:
        return Model(layers, input_shape, weights)
    except ValueError as exc:
        raise CheckpointError(f"inconsistent checkpoint: {exc}") from exc


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load_checkpoint(path) -> Model:
    return from_bytes(Path(path).read_bytes())
