"""Zero-skipping accelerator cost model.

Every multiply-accumulate (MAC) of a dense or conv layer whose activation-side
operand is zero (``|a| <= tau``) is skipped. Bias adds / output writes, ReLU
comparisons and pooling reads are never skippable. With unit costs the energy
of a pass is::

    E = mac_energy * executed_macs + nonskippable_energy * nonskippable_ops

and the energy ratio is E(zero-skipping) / E(no skipping), which is at most 1.
Weight-side zeros are not skipped; zero padding of a conv counts as a zero
activation operand.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import conv_output_size
from .errors import ShapeError
from .model import LayerSpec, Model, forward

REPORT_COLUMNS = (
    "layer_index", "layer_kind", "total_macs", "skipped_macs", "nonskippable_ops",
    "firing_percent", "energy_optimized", "energy_worst_case", "ratio",
)


@dataclass(frozen=True)
class CostModel:
    mac_energy: float = 1.0
    nonskippable_energy: float = 1.0
    zero_threshold: float = 0.0

    def __post_init__(self):
        if not (self.mac_energy > 0 and self.nonskippable_energy > 0):
            raise ValueError("energies must be positive")
        if self.zero_threshold < 0:
            raise ValueError("zero_threshold must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CostModel":
        unknown = set(d) - {"mac_energy", "nonskippable_energy", "zero_threshold"}
        if unknown:
            raise ValueError(f"unknown cost keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


def count_layer_ops(layer: LayerSpec, input_shape: Sequence[int]) -> tuple[int, int]:
    """Static (total_macs, nonskippable_ops) of ``layer`` for a batched ``input_shape``."""
    shape = tuple(int(n) for n in input_shape)
    b = shape[0]
    if layer.kind == "dense":
        if shape[1:] != (layer.in_features,):
            raise ShapeError(f"dense expects (B, {layer.in_features}), got {shape}")
        return b * layer.in_features * layer.out_features, b * layer.out_features
    if layer.kind == "conv2d":
        if len(shape) != 4 or shape[1] != layer.in_channels:
            raise ShapeError(f"conv2d expects (B, {layer.in_channels}, H, W), got {shape}")
        k = layer.kernel_size
        oh = conv_output_size(shape[2], k, layer.stride, layer.padding)
        ow = conv_output_size(shape[3], k, layer.stride, layer.padding)
        outputs = b * layer.out_channels * oh * ow
        return outputs * layer.in_channels * k * k, outputs
    if layer.kind == "relu":
        return 0, int(np.prod(shape))
    if layer.kind == "maxpool2d":
        if len(shape) != 4:
            raise ShapeError(f"maxpool2d expects (B, C, H, W), got {shape}")
        w, s = layer.window, layer.stride
        windows = b * shape[1] * ((shape[2] - w) // s + 1) * ((shape[3] - w) // s + 1)
        return 0, windows * w * w
    if layer.kind == "flatten":
        return 0, 0
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def count_skipped_macs(layer: LayerSpec, x: np.ndarray, tau: float = 0.0) -> int:
    """MACs of ``layer`` whose activation operand (an element of ``x``) is zero."""
    if layer.kind == "dense":
        zeros = int(np.count_nonzero(np.abs(x) <= tau))
        return zeros * layer.out_features
    if layer.kind == "conv2d":
        p, k = layer.padding, layer.kernel_size
        zero = np.abs(x) <= tau
        if p:
            zero = np.pad(zero, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=True)
        # each (input element, tap) pair reaching an output position is one MAC per out channel
        win = sliding_window_view(zero, (k, k), axis=(2, 3))[:, :, ::layer.stride, ::layer.stride]
        return int(np.count_nonzero(win)) * layer.out_channels
    return 0


@dataclass
class LayerEnergy:
    layer_index: int
    layer_kind: str
    total_macs: int
    skipped_macs: int
    nonskippable_ops: int
    firing_count: int
    activation_count: int

    @property
    def firing_fraction(self) -> float:
        return self.firing_count / self.activation_count if self.activation_count else 0.0

    @property
    def firing_percent(self) -> float:
        return 100.0 * self.firing_count / self.activation_count if self.activation_count else 0.0

    def energy_optimized(self, cost: CostModel) -> float:
        return (cost.mac_energy * (self.total_macs - self.skipped_macs)
                + cost.nonskippable_energy * self.nonskippable_ops)

    def energy_worst_case(self, cost: CostModel) -> float:
        return cost.mac_energy * self.total_macs + cost.nonskippable_energy * self.nonskippable_ops

    def merged(self, other: "LayerEnergy") -> "LayerEnergy":
        if (self.layer_index, self.layer_kind) != (other.layer_index, other.layer_kind):
            raise ValueError("cannot merge reports of different layers")
        return LayerEnergy(
            self.layer_index, self.layer_kind,
            self.total_macs + other.total_macs,
            self.skipped_macs + other.skipped_macs,
            self.nonskippable_ops + other.nonskippable_ops,
            self.firing_count + other.firing_count,
            self.activation_count + other.activation_count,
        )


@dataclass
class EnergyReport:
    per_layer: list[LayerEnergy]
    cost: CostModel = field(default_factory=CostModel)

    @property
    def total_macs(self) -> int:
        return sum(layer.total_macs for layer in self.per_layer)

    @property
    def skipped_macs(self) -> int:
        return sum(layer.skipped_macs for layer in self.per_layer)

    @property
    def nonskippable_ops(self) -> int:
        return sum(layer.nonskippable_ops for layer in self.per_layer)

    @property
    def energy_optimized(self) -> float:
        c = self.cost
        return c.mac_energy * (self.total_macs - self.skipped_macs) + c.nonskippable_energy * self.nonskippable_ops

    @property
    def energy_worst_case(self) -> float:
        return self.cost.mac_energy * self.total_macs + self.cost.nonskippable_energy * self.nonskippable_ops

    @property
    def ratio(self) -> float:
        worst = self.energy_worst_case
        if worst <= 0:
            raise ValueError("model performs no operations; energy ratio undefined")
        return self.energy_optimized / worst

    @property
    def floor_ratio(self) -> float:
        """Ratio reached when every MAC is skipped."""
        return self.cost.nonskippable_energy * self.nonskippable_ops / self.energy_worst_case

    def __add__(self, other: "EnergyReport") -> "EnergyReport":
        if self.cost != other.cost:
            raise ValueError("cannot merge reports built with different cost models")
        if len(self.per_layer) != len(other.per_layer):
            raise ValueError("cannot merge reports of different models")
        return EnergyReport([a.merged(b) for a, b in zip(self.per_layer, other.per_layer)], self.cost)

    # serialization ----------------------------------------------------------------------
    def rows(self) -> list[dict]:
        rows = []
        for layer in self.per_layer:
            opt, worst = layer.energy_optimized(self.cost), layer.energy_worst_case(self.cost)
            rows.append({
                "layer_index": layer.layer_index,
                "layer_kind": layer.layer_kind,
                "total_macs": layer.total_macs,
                "skipped_macs": layer.skipped_macs,
                "nonskippable_ops": layer.nonskippable_ops,
                "firing_percent": layer.firing_percent,
                "energy_optimized": opt,
                "energy_worst_case": worst,
                "ratio": opt / worst if worst > 0 else 1.0,
            })
        rows.append({
            "layer_index": "total",
            "layer_kind": "total",
            "total_macs": self.total_macs,
            "skipped_macs": self.skipped_macs,
            "nonskippable_ops": self.nonskippable_ops,
            "firing_percent": "",
            "energy_optimized": self.energy_optimized,
            "energy_worst_case": self.energy_worst_case,
            "ratio": self.ratio,
        })
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: _fmt(v) for k, v in row.items()})
        return buf.getvalue()

    def to_dict(self) -> dict:
        rows = self.rows()
        return {"cost": self.cost.to_dict(), "layers": rows[:-1], "total": rows[-1]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def validate_report_dict(doc: dict) -> None:
    """Schema check applied before a report document is written."""
    if set(doc) != {"cost", "layers", "total"}:
        raise ValueError(f"energy report keys {sorted(doc)} do not match the schema")
    for row in doc["layers"] + [doc["total"]]:
        if tuple(sorted(row)) != tuple(sorted(REPORT_COLUMNS)):
            raise ValueError(f"energy report row has columns {sorted(row)}")
        if row["skipped_macs"] > row["total_macs"]:
            raise ValueError("skipped MACs exceed total MACs")
        if not 0 < row["ratio"] <= 1 and row["layer_kind"] == "total":
            raise ValueError(f"energy ratio {row['ratio']} outside (0, 1]")


def simulate_energy(model: Model, batch, cost: Optional[CostModel] = None) -> EnergyReport:
    """Run ``batch`` forward and count skippable MACs layer by layer."""
    cost = cost or CostModel()
    _, rec = forward(model, batch)
    tau = cost.zero_threshold
    layers = []
    for i, layer in enumerate(model.layers):
        x = rec.layer_input(i).data
        out = rec[i].activation.data
        total, nonskip = count_layer_ops(layer, x.shape)
        layers.append(LayerEnergy(
            layer_index=i,
            layer_kind=layer.kind,
            total_macs=total,
            skipped_macs=count_skipped_macs(layer, x, tau),
            nonskippable_ops=nonskip,
            firing_count=int(np.count_nonzero(np.abs(out) > tau)),
            activation_count=int(out.size),
        ))
    return EnergyReport(layers, cost)


def iter_batches(data, batch_size: int = 256) -> Iterator[np.ndarray]:
    """Yield input batches from a Dataset, an array of samples, or a list of batches."""
    if isinstance(data, (list, tuple)):
        yield from (np.asarray(b) for b in data)
        return
    images = getattr(data, "images", data)
    images = np.asarray(images)
    for start in range(0, len(images), batch_size):
        yield images[start:start + batch_size]


def simulate_dataset(model: Model, data, cost: Optional[CostModel] = None, batch_size: int = 256) -> EnergyReport:
    """Energy report summed over every batch of ``data``."""
    report = None
    for batch in iter_batches(data, batch_size):
        if len(batch) == 0:
            continue
        r = simulate_energy(model, batch, cost)
        report = r if report is None else report + r
    if report is None:
        raise ValueError("dataset is empty")
    return report


def energy_ratio_over_dataset(model: Model, data, cost: Optional[CostModel] = None, batch_size: int = 256) -> float:
    """Energy-weighted ratio: total optimized energy over total worst-case energy."""
    return simulate_dataset(model, data, cost, batch_size).ratio


def energy_decrease(ratio_st: float, ratio_eat: float) -> float:
    """Relative energy saving in percent of a model over its baseline."""
    for r in (ratio_st, ratio_eat):
        if not 0 < r <= 1:
            raise ValueError(f"energy ratios must lie in (0, 1], got {r}")
    return 100.0 * (ratio_st - ratio_eat) / ratio_st


def firing_stats(model: Model, data, tau: float = 0.0, batch_size: int = 256) -> list[tuple[int, str, float]]:
    """Percentage of nonzero (|a| > tau) activations per layer over the whole dataset."""
    firing: Optional[np.ndarray] = None
    sizes: Optional[np.ndarray] = None
    for batch in iter_batches(data, batch_size):
        if len(batch) == 0:
            continue
        _, rec = forward(model, batch)
        f = np.array([np.count_nonzero(np.abs(e.activation.data) > tau) for e in rec], dtype=np.int64)
        n = np.array([e.activation.size for e in rec], dtype=np.int64)
        firing = f if firing is None else firing + f
        sizes = n if sizes is None else sizes + n
    if firing is None:
        raise ValueError("dataset is empty")
    return [(i, layer.kind, 100.0 * int(firing[i]) / int(sizes[i]))
            for i, layer in enumerate(model.layers)]


def mean_firing_fraction(stats: Iterable[tuple[int, str, float]], kind: str = "relu") -> float:
    values = [pct / 100.0 for _, k, pct in stats if k == kind]
    if not values:
        raise ValueError(f"no {kind} layers")
    return float(np.mean(values))
