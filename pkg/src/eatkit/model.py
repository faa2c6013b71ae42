"""Sequential network description, seeded initialization and the recorded forward pass."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NonFiniteError, ShapeError

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2d", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0
    bias: bool = True

    @property
    def parametric(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def weight_shapes(self) -> list[tuple]:
        if self.kind == "dense":
            shapes = [(self.out_features, self.in_features)]
            return shapes + [(self.out_features,)] if self.bias else shapes
        if self.kind == "conv2d":
            k = self.kernel_size
            shapes = [(self.out_channels, self.in_channels, k, k)]
            return shapes + [(self.out_channels,)] if self.bias else shapes
        return []

    def to_dict(self) -> dict:
        if self.kind == "dense":
            return {"kind": "dense", "in_features": self.in_features,
                    "out_features": self.out_features, "bias": self.bias}
        if self.kind == "conv2d":
            return {"kind": "conv2d", "in_channels": self.in_channels,
                    "out_channels": self.out_channels, "kernel_size": self.kernel_size,
                    "stride": self.stride, "padding": self.padding, "bias": self.bias}
        if self.kind == "maxpool2d":
            return {"kind": "maxpool2d", "window": self.window, "stride": self.stride}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        kind = d.get("kind")
        if kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {kind!r}")
        params = {k: v for k, v in d.items() if k != "kind"}
        if kind == "maxpool2d" and "stride" not in params:
            params["stride"] = params.get("window", 0)
        return cls(kind=kind, **params)


def dense(in_features: int, out_features: int, bias: bool = True) -> LayerSpec:
    return LayerSpec("dense", in_features=in_features, out_features=out_features, bias=bias)


def conv2d(in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
           padding: int = 0, bias: bool = True) -> LayerSpec:
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel_size=kernel_size, stride=stride, padding=padding, bias=bias)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2d(window: int, stride: Optional[int] = None) -> LayerSpec:
    return LayerSpec("maxpool2d", window=window, stride=window if stride is None else stride)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def output_shape(layer: LayerSpec, in_shape: tuple, index: int = 0) -> tuple:
    """Per-sample output shape of ``layer`` for per-sample input ``in_shape``."""
    where = f"layer {index} ({layer.kind})"
    if layer.kind == "dense":
        if in_shape != (layer.in_features,):
            raise ShapeError(f"{where}: expects input ({layer.in_features},), got {in_shape}")
        return (layer.out_features,)
    if layer.kind == "conv2d":
        if len(in_shape) != 3 or in_shape[0] != layer.in_channels:
            raise ShapeError(f"{where}: expects ({layer.in_channels}, H, W) input, got {in_shape}")
        _, h, w = in_shape
        k, p, s = layer.kernel_size, layer.padding, layer.stride
        if k < 1 or s < 1 or p < 0 or h + 2 * p < k or w + 2 * p < k:
            raise ShapeError(f"{where}: kernel {k} stride {s} padding {p} invalid for input {h}x{w}")
        return (layer.out_channels, ad.conv_output_size(h, k, s, p), ad.conv_output_size(w, k, s, p))
    if layer.kind == "maxpool2d":
        if len(in_shape) != 3:
            raise ShapeError(f"{where}: expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        win, s = layer.window, layer.stride
        if win < 1 or s < 1 or h < win or w < win:
            raise ShapeError(f"{where}: window {win} stride {s} invalid for input {h}x{w}")
        return (c, (h - win) // s + 1, (w - win) // s + 1)
    if layer.kind == "relu":
        return tuple(in_shape)
    if layer.kind == "flatten":
        return (int(np.prod(in_shape)),)
    raise ShapeError(f"{where}: unknown layer kind {layer.kind!r}")


@dataclass
class ActivationEntry:
    layer_index: int
    layer_kind: str
    activation: Tensor


@dataclass
class ActivationRecord:
    """Per-layer outputs of one forward pass, plus the raw input batch."""

    input: Tensor
    entries: list[ActivationEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i: int) -> ActivationEntry:
        return self.entries[i]

    @property
    def batch_size(self) -> int:
        return self.input.shape[0]

    def layer_input(self, index: int) -> Tensor:
        return self.input if index == 0 else self.entries[index - 1].activation


class Model:
    """Plain sequential stack of layers with one weight (+ optional bias) per parametric layer."""

    def __init__(self, layers: Sequence[LayerSpec], input_shape: Sequence[int], weights: Sequence[Tensor]):
        self.layers = list(layers)
        self.input_shape = tuple(int(n) for n in input_shape)
        self.weights = list(weights)
        self.shapes = self._infer_shapes()
        self._slots = self._weight_slots()
        expected = [s for layer in self.layers for s in layer.weight_shapes()]
        if len(expected) != len(self.weights):
            raise ShapeError(f"model needs {len(expected)} weight tensors, got {len(self.weights)}")
        for i, (want, t) in enumerate(zip(expected, self.weights)):
            if tuple(t.shape) != want:
                raise ShapeError(f"weight {i} has shape {t.shape}, expected {want}")

    def _infer_shapes(self) -> list[tuple]:
        if not self.layers:
            raise ShapeError("model has no layers")
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            shapes.append(output_shape(layer, shapes[-1], i))
        return shapes

    def _weight_slots(self) -> list[tuple[int, int]]:
        slots, pos = [], 0
        for layer in self.layers:
            n = len(layer.weight_shapes())
            slots.append((pos, pos + n))
            pos += n
        return slots

    @property
    def num_classes(self) -> int:
        out = self.shapes[-1]
        if len(out) != 1:
            raise ShapeError(f"model output shape {out} is not a class vector")
        return out[0]

    @property
    def parameter_count(self) -> int:
        return int(sum(w.size for w in self.weights))

    @property
    def dtype(self):
        return self.weights[0].dtype if self.weights else np.dtype(np.float64)

    def layer_weights(self, index: int) -> list[Tensor]:
        a, b = self._slots[index]
        return self.weights[a:b]

    def copy(self) -> "Model":
        weights = [Tensor(w.data.copy(), requires_grad=w.requires_grad, name=w.name) for w in self.weights]
        return Model(self.layers, self.input_shape, weights)

    def with_weights(self, weights: Sequence[Tensor]) -> "Model":
        return Model(self.layers, self.input_shape, weights)

    def forward(self, batch) -> tuple[Tensor, ActivationRecord]:
        return forward(self, batch)

    def __repr__(self) -> str:
        kinds = ", ".join(layer.kind for layer in self.layers)
        return f"Model(input={self.input_shape}, layers=[{kinds}], m={self.parameter_count})"


def init_model(layers: Sequence[LayerSpec], input_shape: Sequence[int], seed: int = 0,
               dtype=np.float64) -> Model:
    """He-style uniform fan-in initialization, biases zero; fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    weights = []
    for i, layer in enumerate(layers):
        shapes = layer.weight_shapes()
        if not shapes:
            continue
        w_shape = shapes[0]
        fan_in = int(np.prod(w_shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, size=w_shape).astype(dtype),
                              requires_grad=True, name=f"layer{i}.weight"))
        if len(shapes) > 1:
            weights.append(Tensor(np.zeros(shapes[1], dtype=dtype), requires_grad=True,
                                  name=f"layer{i}.bias"))
    return Model(layers, input_shape, weights)


def apply_layer(layer: LayerSpec, params: Sequence[Tensor], x: Tensor) -> Tensor:
    bias = params[1] if len(params) > 1 else None
    if layer.kind == "dense":
        return ad.linear(x, params[0], bias)
    if layer.kind == "conv2d":
        return ad.conv2d(x, params[0], bias, stride=layer.stride, padding=layer.padding)
    if layer.kind == "relu":
        return ad.relu(x)
    if layer.kind == "maxpool2d":
        return ad.maxpool2d(x, layer.window, layer.stride)
    if layer.kind == "flatten":
        return ad.reshape(x, (x.shape[0], -1))
    raise ShapeError(f"unknown layer kind {layer.kind!r}")


def forward(model: Model, batch) -> tuple[Tensor, ActivationRecord]:
    """Run ``batch`` through every layer, capturing each layer's output.

    Raises ShapeError if the batch does not match the model's input shape and
    NonFiniteError if any activation is NaN/Inf.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    if x.ndim < 1 or tuple(x.shape[1:]) != model.input_shape or x.shape[0] < 1:
        raise ShapeError(f"batch shape {x.shape} does not match model input (B, {model.input_shape})")
    record = ActivationRecord(input=x)
    h = x
    for i, layer in enumerate(model.layers):
        h = apply_layer(layer, model.layer_weights(i), h)
        if not np.isfinite(h.data).all():
            raise NonFiniteError(f"non-finite activation at layer {i} ({layer.kind})")
        record.entries.append(ActivationEntry(i, layer.kind, h))
    return h, record


def mlp(input_dim: int, hidden: Sequence[int], num_classes: int, bias: bool = True) -> list[LayerSpec]:
    layers, prev = [], input_dim
    for width in hidden:
        layers += [dense(prev, width, bias), relu()]
        prev = width
    layers.append(dense(prev, num_classes, bias))
    return layers


def small_cnn(in_channels: int, image_size: int, num_classes: int,
              conv_channels: Sequence[int] = (8, 16), hidden: int = 32,
              kernel_size: int = 3) -> list[LayerSpec]:
    """conv-relu-pool x2, then dense-relu-dense; 'same' padding, 2x2 pooling."""
    pad = kernel_size // 2
    c1, c2 = conv_channels
    size = image_size // 2 // 2
    return [
        conv2d(in_channels, c1, kernel_size, padding=pad), relu(), maxpool2d(2),
        conv2d(c1, c2, kernel_size, padding=pad), relu(), maxpool2d(2),
        flatten(),
        dense(c2 * size * size, hidden), relu(),
        dense(hidden, num_classes),
    ]
