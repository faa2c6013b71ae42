"""Experiment spec files and the runners behind the CLI commands.

A spec is one JSON document (``schema_version`` 1)::

    {
      "schema_version": 1,
      "name": "eat-l1",
      "dtype": "float64",
      "model": {"arch": "small_cnn", "conv_channels": [8, 16], "hidden": 32},
      "dataset": {"source": "synthetic", "num_classes": 4, "train_per_class": 100,
                  "test_per_class": 50, "image_size": 16, "channels": 3,
                  "noise_std": 1.0, "seed": 0, "validation_size": 100},
      "train": {"epochs": 20, "lr_initial": 0.02, "batch_size": 32, "seed": 0,
                "penalty": {"sigma": 1e-4, "lambda": 1.0, "sign": 1}},
      "cost": {"mac_energy": 1.0, "nonskippable_energy": 1.0, "zero_threshold": 0.0},
      "ablation": {"sigmas": [1e-4], "lambdas": [0, 0.5, 1, 2, 5], "margin": 0.03}
    }

Relative dataset paths resolve against the spec file's directory.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from .data import Dataset, gen_synthetic, load_cifar10_binary
from .energy import CostModel, simulate_dataset, validate_report_dict, energy_decrease
from .errors import ConfigError, DivergenceError, NonFiniteError
from .model import LayerSpec, Model, flatten, init_model, mlp, small_cnn
from .sparsity import PenaltyConfig
from .trainer import TrainConfig, evaluate_accuracy, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ARCHS = ("small_cnn", "mlp", "layers")
TOP_KEYS = {"schema_version", "name", "dtype", "model", "dataset", "train", "cost", "ablation"}
SUMMARY_KEYS = {
    "schema_version", "name", "tag", "model", "dataset", "parameter_count", "train",
    "final_loss", "test_accuracy", "test_energy_ratio", "validation_accuracy",
    "validation_energy_ratio", "firing_stats",
}
ABLATION_COLUMNS = ("sigma", "lambda", "accuracy", "energy_ratio", "status")
REPORT_COLUMNS = (
    "dataset", "model", "st_run", "eat_run", "st_accuracy", "eat_accuracy",
    "st_energy_ratio", "eat_energy_ratio", "energy_decrease",
)


@dataclass(frozen=True)
class DatasetSpec:
    source: str
    params: dict
    validation_size: int = 100

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path) -> "DatasetSpec":
        d = dict(d)
        source = d.pop("source", None)
        validation_size = int(d.pop("validation_size", 100))
        if validation_size < 1:
            raise ConfigError("validation_size must be >= 1")
        if source == "synthetic":
            required = {"num_classes", "train_per_class", "test_per_class", "image_size"}
            allowed = required | {"channels", "noise_std", "seed", "grid"}
        elif source == "cifar10":
            required = {"train_paths", "test_paths"}
            allowed = required | {"subset"}
            for key in ("train_paths", "test_paths"):
                if not isinstance(d.get(key), list) or not d[key]:
                    raise ConfigError(f"dataset.{key} must be a nonempty list")
                d[key] = [str((base_dir / p).resolve()) for p in d[key]]
        else:
            raise ConfigError(f"dataset.source must be 'synthetic' or 'cifar10', got {source!r}")
        missing = required - set(d)
        unknown = set(d) - allowed
        if missing:
            raise ConfigError(f"dataset is missing keys {sorted(missing)}")
        if unknown:
            raise ConfigError(f"unknown dataset keys {sorted(unknown)}")
        return cls(source, d, validation_size)

    def to_dict(self) -> dict:
        return {"source": self.source, **self.params, "validation_size": self.validation_size}


@dataclass(frozen=True)
class AblationSpec:
    sigmas: tuple
    lambdas: tuple
    margin: float = 0.03

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSpec":
        unknown = set(d) - {"sigmas", "lambdas", "margin"}
        if unknown:
            raise ConfigError(f"unknown ablation keys {sorted(unknown)}")
        sigmas = tuple(float(s) for s in d.get("sigmas") or ())
        lambdas = tuple(float(v) for v in d.get("lambdas") or ())
        if not sigmas or not lambdas:
            raise ConfigError("ablation grids must be nonempty")
        if any(s <= 0 for s in sigmas) or any(v < 0 for v in lambdas):
            raise ConfigError("ablation needs sigma > 0 and lambda >= 0")
        return cls(sigmas, lambdas, float(d.get("margin", 0.03)))

    def to_dict(self) -> dict:
        return {"sigmas": list(self.sigmas), "lambdas": list(self.lambdas), "margin": self.margin}


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    model: dict
    dataset: DatasetSpec
    train: TrainConfig
    cost: CostModel = field(default_factory=CostModel)
    ablation: Optional[AblationSpec] = None
    dtype: str = "float64"

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path = Path(".")) -> "ExperimentSpec":
        if not isinstance(d, dict):
            raise ConfigError("spec must be a JSON object")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
        unknown = set(d) - TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        for key in ("model", "dataset", "train"):
            if not isinstance(d.get(key), dict):
                raise ConfigError(f"spec needs a '{key}' object")
        model = dict(d["model"])
        if model.get("arch") not in ARCHS:
            raise ConfigError(f"model.arch must be one of {ARCHS}")
        dtype = d.get("dtype", "float64")
        if dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        try:
            cost = CostModel.from_dict(d.get("cost") or {})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"cost: {exc}") from exc
        ablation = AblationSpec.from_dict(d["ablation"]) if d.get("ablation") else None
        return cls(
            name=str(d.get("name", "run")),
            model=model,
            dataset=DatasetSpec.from_dict(d["dataset"], base_dir),
            train=TrainConfig.from_dict(d["train"]),
            cost=cost,
            ablation=ablation,
            dtype=dtype,
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "dtype": self.dtype,
            "model": self.model,
            "dataset": self.dataset.to_dict(),
            "train": self.train.to_dict(),
            "cost": self.cost.to_dict(),
            "ablation": self.ablation.to_dict() if self.ablation else None,
        }

    def with_seed(self, seed: int) -> "ExperimentSpec":
        return replace(self, train=replace(self.train, seed=int(seed)))


def load_spec(path, seed: Optional[int] = None) -> ExperimentSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    spec = ExperimentSpec.from_dict(doc, path.parent)
    return spec.with_seed(seed) if seed is not None else spec


# datasets & models ------------------------------------------------------------------------


def load_datasets(ds: DatasetSpec, dtype=np.float64) -> tuple[Dataset, Dataset, Dataset]:
    """(train, test, validation); validation is a seeded random subset of the test split."""
    p = ds.params
    if ds.source == "synthetic":
        ntr, nte = p["train_per_class"], p["test_per_class"]
        ncls = int(p["num_classes"])
        ntr = [int(ntr)] * ncls if np.isscalar(ntr) else [int(n) for n in ntr]
        nte = [int(nte)] * ncls if np.isscalar(nte) else [int(n) for n in nte]
        if len(ntr) != ncls or len(nte) != ncls:
            raise ConfigError("per-class sample lists need one entry per class")
        seed = int(p.get("seed", 0))
        try:
            full = gen_synthetic(ncls, [a + b for a, b in zip(ntr, nte)], int(p["image_size"]),
                                 float(p.get("noise_std", 0.1)), seed, channels=int(p.get("channels", 3)),
                                 grid=int(p.get("grid", 4)), dtype=dtype)
        except ValueError as exc:
            raise ConfigError(f"dataset: {exc}") from exc
        starts = np.cumsum([0] + [a + b for a, b in zip(ntr, nte)])[:-1]
        tr_idx = np.concatenate([np.arange(s, s + a) for s, a in zip(starts, ntr)])
        te_idx = np.concatenate([np.arange(s + a, s + a + b) for s, a, b in zip(starts, ntr, nte)])
        train_set, test_set = full.subset(tr_idx, "train"), full.subset(te_idx, "test")
    else:
        limit = p.get("subset")
        seed = 0
        train_set = load_cifar10_binary(p["train_paths"], "train", limit, dtype)
        test_set = load_cifar10_binary(p["test_paths"], "test", limit, dtype)
    n_val = min(ds.validation_size, len(test_set))
    pick = np.sort(np.random.default_rng([seed, 1]).choice(len(test_set), size=n_val, replace=False))
    return train_set, test_set, test_set.subset(pick, "validation")


def build_layers(model_spec: dict, sample_shape: Sequence[int], num_classes: int) -> list[LayerSpec]:
    arch = model_spec.get("arch")
    opts = {k: v for k, v in model_spec.items() if k != "arch"}
    c, h, w = sample_shape
    try:
        if arch == "small_cnn":
            if h != w:
                raise ConfigError("small_cnn needs square images")
            return small_cnn(c, h, num_classes, conv_channels=tuple(opts.get("conv_channels", (8, 16))),
                             hidden=int(opts.get("hidden", 32)), kernel_size=int(opts.get("kernel_size", 3)))
        if arch == "mlp":
            return [flatten()] + mlp(c * h * w, [int(n) for n in opts.get("hidden", [64])], num_classes)
        if arch == "layers":
            return [LayerSpec.from_dict(layer) for layer in opts["layers"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    raise ConfigError(f"unknown arch {arch!r}")


def build_model(spec: ExperimentSpec, train_set: Dataset) -> Model:
    layers = build_layers(spec.model, train_set.sample_shape, train_set.num_classes)
    try:
        model = init_model(layers, train_set.sample_shape, seed=spec.train.seed, dtype=np.dtype(spec.dtype))
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc
    if model.num_classes != train_set.num_classes:
        raise ConfigError(f"model has {model.num_classes} outputs, dataset {train_set.num_classes} classes")
    return model


def run_tag(cfg: TrainConfig) -> str:
    pen = cfg.penalty
    if pen is None or pen.lam == 0:
        return "ST"
    return "EAT" if pen.sign > 0 else "sponge"


# file helpers --------------------------------------------------------------------------------


def dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(row.get(k)) for k in columns})
    return buf.getvalue()


def _write(out_dir: Path, name: str, text: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(text)
    return path


# commands ----------------------------------------------------------------------------------


def _firing_rows(report) -> list[dict]:
    return [{"layer_index": layer.layer_index, "layer_kind": layer.layer_kind,
             "firing_percent": layer.firing_percent} for layer in report.per_layer]


def validate_summary(doc: dict) -> None:
    if set(doc) != SUMMARY_KEYS:
        raise ValueError(f"summary keys {sorted(set(doc) ^ SUMMARY_KEYS)} do not match the schema")
    if doc["tag"] not in ("ST", "EAT", "sponge"):
        raise ValueError(f"bad run tag {doc['tag']!r}")
    for key in ("test_accuracy", "validation_accuracy"):
        if not 0 <= doc[key] <= 1:
            raise ValueError(f"{key} outside [0, 1]")
    for key in ("test_energy_ratio", "validation_energy_ratio"):
        if not 0 < doc[key] <= 1:
            raise ValueError(f"{key} outside (0, 1]")


def run_train(spec: ExperimentSpec, out_dir) -> dict:
    """Train per ``spec``; write checkpoint.eatm, history.csv, energy_layers.csv, summary.json."""
    out_dir = Path(out_dir)
    dtype = np.dtype(spec.dtype)
    train_set, test_set, val_set = load_datasets(spec.dataset, dtype)
    model = build_model(spec, train_set)
    trained, history = train(model, train_set, spec.train)

    test_report = simulate_dataset(trained, test_set.images, spec.cost)
    val_report = simulate_dataset(trained, val_set.images, spec.cost)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "name": spec.name,
        "tag": run_tag(spec.train),
        "model": spec.model,
        "dataset": spec.dataset.to_dict(),
        "parameter_count": trained.parameter_count,
        "train": spec.train.to_dict(),
        "final_loss": history.epochs[-1].loss if len(history) else None,
        "test_accuracy": evaluate_accuracy(trained, test_set),
        "test_energy_ratio": test_report.ratio,
        "validation_accuracy": evaluate_accuracy(trained, val_set),
        "validation_energy_ratio": val_report.ratio,
        "firing_stats": _firing_rows(test_report),
    }
    validate_summary(summary)
    validate_report_dict(test_report.to_dict())

    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint.save_checkpoint(trained, out_dir / "checkpoint.eatm")
    history_cols = ("epoch", "loss", "penalty", "lr", "train_accuracy", "val_accuracy", "energy_ratio")
    _write(out_dir, "history.csv", rows_to_csv(history.rows(), history_cols))
    _write(out_dir, "energy_layers.csv", test_report.to_csv())
    _write(out_dir, "summary.json", dump_json(summary))
    return summary


def run_energy(spec: ExperimentSpec, checkpoint_path, out_dir, split: str = "test") -> dict:
    """Energy report + accuracy of a saved checkpoint on one split of the spec's dataset."""
    model = checkpoint.load_checkpoint(checkpoint_path)
    train_set, test_set, val_set = load_datasets(spec.dataset, np.dtype(model.dtype))
    data = {"train": train_set, "test": test_set, "validation": val_set}.get(split)
    if data is None:
        raise ConfigError(f"unknown split {split!r}")
    if data.sample_shape != model.input_shape:
        raise ConfigError(f"checkpoint expects inputs {model.input_shape}, dataset has {data.sample_shape}")
    if model.num_classes != data.num_classes:
        raise ConfigError(f"checkpoint has {model.num_classes} outputs, dataset {data.num_classes} classes")
    report = simulate_dataset(model, data.images, spec.cost)
    doc = report.to_dict()
    validate_report_dict(doc)
    doc.update({"split": split, "accuracy": evaluate_accuracy(model, data), "samples": len(data)})
    out_dir = Path(out_dir)
    _write(out_dir, "energy_layers.csv", report.to_csv())
    _write(out_dir, "energy.json", dump_json(doc))
    return doc


def _train_cell(spec: ExperimentSpec, model: Model, train_set: Dataset, val_set: Dataset,
                sigma: float, lam: float) -> dict:
    base = spec.train.penalty or PenaltyConfig()
    cfg = replace(spec.train, penalty=replace(base, sigma=sigma, lam=lam))
    row = {"sigma": sigma, "lambda": lam, "accuracy": None, "energy_ratio": None}
    try:
        trained, _ = train(model, train_set, cfg)
        row["accuracy"] = evaluate_accuracy(trained, val_set)
        row["energy_ratio"] = simulate_dataset(trained, val_set.images, spec.cost).ratio
        row["status"] = "ok"
    except (DivergenceError, NonFiniteError, FloatingPointError) as exc:
        log.warning("cell sigma=%g lambda=%g diverged: %s", sigma, lam, exc)
        row.update(accuracy=None, energy_ratio=None, status="diverged")
    return row


def _cell_worker(args) -> dict:
    spec_doc, sigma, lam = args
    spec = ExperimentSpec.from_dict(spec_doc)
    dtype = np.dtype(spec.dtype)
    train_set, _, val_set = load_datasets(spec.dataset, dtype)
    model = build_model(spec, train_set)
    return _train_cell(spec, model, train_set, val_set, sigma, lam)


def select_best(rows: Sequence[dict], baseline_accuracy: float, margin: float = 0.03) -> Optional[dict]:
    """Lowest energy ratio among cells whose accuracy is within ``margin`` of the baseline."""
    ok = [r for r in rows if r["status"] == "ok" and r["accuracy"] >= baseline_accuracy - margin - 1e-12]
    if not ok:
        return None
    return min(ok, key=lambda r: (r["energy_ratio"], -r["accuracy"]))


def run_ablate(spec: ExperimentSpec, out_dir, jobs: int = 1) -> list[dict]:
    """Train one model per (sigma, lambda) cell from a shared initialization.

    Writes ablation.csv (long format) and best.json (ST baseline + selected cell).
    Diverging cells are recorded with status 'diverged' and do not stop the grid.
    """
    if spec.ablation is None:
        raise ConfigError("spec has no 'ablation' section")
    dtype = np.dtype(spec.dtype)
    train_set, _, val_set = load_datasets(spec.dataset, dtype)
    model = build_model(spec, train_set)
    cells = [(s, v) for s in spec.ablation.sigmas for v in spec.ablation.lambdas]
    if jobs > 1:
        doc = spec.to_dict()
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_cell_worker, [(doc, s, v) for s, v in cells]))
    else:
        rows = [_train_cell(spec, model, train_set, val_set, s, v) for s, v in cells]

    baseline = next((r for r in rows if r["lambda"] == 0 and r["status"] == "ok"), None)
    if baseline is None:
        st, _ = train(model, train_set, spec.train.with_penalty(None))
        baseline = {"accuracy": evaluate_accuracy(st, val_set),
                    "energy_ratio": simulate_dataset(st, val_set.images, spec.cost).ratio}
    best = select_best([r for r in rows if r["lambda"] > 0], baseline["accuracy"], spec.ablation.margin)
    out_dir = Path(out_dir)
    _write(out_dir, "ablation.csv", rows_to_csv(rows, ABLATION_COLUMNS))
    _write(out_dir, "best.json", dump_json({
        "baseline": {"accuracy": baseline["accuracy"], "energy_ratio": baseline["energy_ratio"]},
        "best": best,
        "margin": spec.ablation.margin,
    }))
    return rows


def _key(doc) -> str:
    return json.dumps(doc, sort_keys=True)


def pair_runs(summaries: Sequence[tuple[str, dict]]) -> list[tuple[tuple[str, dict], tuple[str, dict]]]:
    """Pair each EAT/sponge run with the unique ST run on the same dataset and model."""
    if len(summaries) < 2:
        raise ConfigError("report needs at least two run summaries")
    groups: dict = {}
    for name, s in summaries:
        groups.setdefault((_key(s["dataset"]), _key(s["model"])), []).append((name, s))
    pairs = []
    for members in groups.values():
        st = [m for m in members if m[1]["tag"] == "ST"]
        others = [m for m in members if m[1]["tag"] != "ST"]
        if len(st) > 1:
            raise ConfigError(f"ambiguous pairing: {len(st)} ST runs ({', '.join(n for n, _ in st)}) "
                              "share a dataset and model")
        if others and not st:
            raise ConfigError(f"no ST run with matching dataset/model for {', '.join(n for n, _ in others)}")
        pairs += [(st[0], o) for o in others]
    if not pairs:
        raise ConfigError("no (ST, EAT) pair found")
    return pairs


def run_report(run_dirs: Sequence, out_dir) -> list[dict]:
    """Table-1-style comparison CSV of paired ST / EAT runs."""
    summaries = []
    for d in run_dirs:
        path = Path(d) / "summary.json"
        summaries.append((Path(d).name, json.loads(path.read_text())))
    rows = []
    for (st_name, st), (eat_name, eat) in pair_runs(summaries):
        rows.append({
            "dataset": st["dataset"].get("source"),
            "model": st["model"].get("arch"),
            "st_run": st_name,
            "eat_run": eat_name,
            "st_accuracy": st["test_accuracy"],
            "eat_accuracy": eat["test_accuracy"],
            "st_energy_ratio": st["test_energy_ratio"],
            "eat_energy_ratio": eat["test_energy_ratio"],
            "energy_decrease": f"{energy_decrease(st['test_energy_ratio'], eat['test_energy_ratio']):.2f}",
        })
    _write(Path(out_dir), "table1.csv", rows_to_csv(rows, REPORT_COLUMNS))
    return rows

