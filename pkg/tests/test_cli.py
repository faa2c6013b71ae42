import copy
import csv
import json
from pathlib import Path

import numpy as np
import pytest

from eatkit import experiment
from eatkit.checkpoint import save_checkpoint
from eatkit.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_RUNTIME, main
from eatkit.errors import ConfigError
from eatkit.model import dense, init_model

BASE = {
    "schema_version": 1,
    "name": "tiny",
    "model": {"arch": "small_cnn", "conv_channels": [4, 4], "hidden": 8},
    "dataset": {"source": "synthetic", "num_classes": 3, "train_per_class": 10, "test_per_class": 6,
                "image_size": 8, "channels": 1, "noise_std": 0.5, "seed": 2, "validation_size": 10},
    "train": {"epochs": 2, "lr_initial": 0.05, "batch_size": 8, "seed": 4},
    "cost": {"mac_energy": 1.0, "nonskippable_energy": 1.0, "zero_threshold": 0.0},
}
EAT = {"sigma": 1e-4, "lambda": 1.0, "sign": 1}
OUTPUTS = ("checkpoint.eatm", "history.csv", "energy_layers.csv", "summary.json")


def write_spec(path, penalty=None, **overrides):
    doc = copy.deepcopy(BASE)
    if penalty is not None:
        doc["train"]["penalty"] = penalty
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key].update(value)
        else:
            doc[key] = value
    path.write_text(json.dumps(doc))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestTrain:
    def test_outputs_and_reproducible(self, tmp_path, capsys):
        spec = write_spec(tmp_path / "eat.json", EAT)
        assert main(["train", "--spec", str(spec), "--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(["train", "--spec", str(spec), "--out", str(tmp_path / "b")]) == EXIT_OK
        for name in OUTPUTS:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        summary = json.loads((tmp_path / "a" / "summary.json").read_text())
        experiment.validate_summary(summary)
        assert summary["tag"] == "EAT"
        assert len(read_csv(tmp_path / "a" / "history.csv")) == 2
        assert '"tag": "EAT"' in capsys.readouterr().out

    def test_lambda_zero_checkpoint_equals_no_penalty(self, tmp_path):
        zero = write_spec(tmp_path / "zero.json", dict(EAT, **{"lambda": 0.0}))
        none = write_spec(tmp_path / "none.json")
        main(["train", "--spec", str(zero), "--out", str(tmp_path / "z")])
        main(["train", "--spec", str(none), "--out", str(tmp_path / "n")])
        assert (tmp_path / "z" / "checkpoint.eatm").read_bytes() == (tmp_path / "n" / "checkpoint.eatm").read_bytes()

    def test_zero_epochs_is_initialization(self, tmp_path):
        spec_path = write_spec(tmp_path / "s.json", train={"epochs": 0})
        assert main(["train", "--spec", str(spec_path), "--out", str(tmp_path / "o")]) == EXIT_OK
        spec = experiment.load_spec(spec_path)
        train_set, _, _ = experiment.load_datasets(spec.dataset)
        init = experiment.build_model(spec, train_set)
        save_checkpoint(init, tmp_path / "init.eatm")
        assert (tmp_path / "o" / "checkpoint.eatm").read_bytes() == (tmp_path / "init.eatm").read_bytes()

    def test_seed_override(self, tmp_path):
        spec = write_spec(tmp_path / "s.json")
        main(["train", "--spec", str(spec), "--out", str(tmp_path / "a")])
        main(["train", "--spec", str(spec), "--out", str(tmp_path / "b"), "--seed", "99"])
        a = json.loads((tmp_path / "a" / "summary.json").read_text())
        b = json.loads((tmp_path / "b" / "summary.json").read_text())
        assert (a["train"]["seed"], b["train"]["seed"]) == (4, 99)
        assert (tmp_path / "a" / "checkpoint.eatm").read_bytes() != (tmp_path / "b" / "checkpoint.eatm").read_bytes()


class TestEnergy:
    def test_untrained_bounds_and_determinism(self, tmp_path):
        spec_path = write_spec(tmp_path / "s.json", train={"epochs": 0})
        main(["train", "--spec", str(spec_path), "--out", str(tmp_path / "run")])
        ckpt = str(tmp_path / "run" / "checkpoint.eatm")
        for out in ("e1", "e2"):
            assert main(["energy", "--spec", str(spec_path), "--checkpoint", ckpt,
                         "--out", str(tmp_path / out)]) == EXIT_OK
        doc = json.loads((tmp_path / "e1" / "energy.json").read_text())
        assert 0 < doc["total"]["ratio"] <= 1
        for name in ("energy.json", "energy_layers.csv"):
            assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()

    def test_floor_via_cli(self, tmp_path):
        layers = [{"kind": "flatten"}, {"kind": "dense", "in_features": 64, "out_features": 3, "bias": False}]
        spec_path = write_spec(tmp_path / "s.json", model={"arch": "layers", "layers": layers},
                               dataset={"noise_std": 0.0})
        spec = experiment.load_spec(spec_path)
        train_set, test_set, _ = experiment.load_datasets(spec.dataset)
        model = experiment.build_model(spec, train_set)
        save_checkpoint(model, tmp_path / "m.eatm")
        assert main(["energy", "--spec", str(spec_path), "--checkpoint", str(tmp_path / "m.eatm"),
                     "--out", str(tmp_path / "e")]) == EXIT_OK
        doc = json.loads((tmp_path / "e" / "energy.json").read_text())
        zeros = int(np.count_nonzero(test_set.images == 0))
        total = test_set.images.size * 3
        expect = (total - zeros * 3 + len(test_set) * 3) / (total + len(test_set) * 3)
        assert doc["total"]["ratio"] == pytest.approx(expect, rel=1e-15)

    def test_mismatched_checkpoint(self, tmp_path):
        spec_path = write_spec(tmp_path / "s.json")
        save_checkpoint(init_model([dense(4, 3)], (4,)), tmp_path / "m.eatm")
        assert main(["energy", "--spec", str(spec_path), "--checkpoint", str(tmp_path / "m.eatm"),
                     "--out", str(tmp_path / "e")]) == EXIT_CONFIG

    def test_corrupt_checkpoint(self, tmp_path):
        spec_path = write_spec(tmp_path / "s.json")
        (tmp_path / "m.eatm").write_bytes(b"garbage")
        assert main(["energy", "--spec", str(spec_path), "--checkpoint", str(tmp_path / "m.eatm"),
                     "--out", str(tmp_path / "e")]) == EXIT_IO


class TestAblate:
    def test_single_cell_matches_train_and_energy(self, tmp_path):
        spec = write_spec(tmp_path / "s.json", EAT, ablation={"sigmas": [1e-4], "lambdas": [1.0]})
        assert main(["ablate", "--spec", str(spec), "--out", str(tmp_path / "ab")]) == EXIT_OK
        row = read_csv(tmp_path / "ab" / "ablation.csv")[0]
        main(["train", "--spec", str(spec), "--out", str(tmp_path / "t")])
        main(["energy", "--spec", str(spec), "--checkpoint", str(tmp_path / "t" / "checkpoint.eatm"),
              "--out", str(tmp_path / "e"), "--split", "validation"])
        doc = json.loads((tmp_path / "e" / "energy.json").read_text())
        assert row["status"] == "ok"
        assert float(row["energy_ratio"]) == doc["total"]["ratio"]
        assert float(row["accuracy"]) == doc["accuracy"]

    def test_lambda_zero_column_equals_st(self, tmp_path):
        spec = write_spec(tmp_path / "s.json", EAT, ablation={"sigmas": [1e-2, 1e-4], "lambdas": [0, 1.0]})
        main(["ablate", "--spec", str(spec), "--out", str(tmp_path / "ab")])
        st_spec = write_spec(tmp_path / "st.json")
        main(["train", "--spec", str(st_spec), "--out", str(tmp_path / "st")])
        st = json.loads((tmp_path / "st" / "summary.json").read_text())
        rows = read_csv(tmp_path / "ab" / "ablation.csv")
        assert len(rows) == 4
        zero = [r for r in rows if float(r["lambda"]) == 0]
        assert len(zero) == 2
        for r in zero:
            assert float(r["energy_ratio"]) == st["validation_energy_ratio"]
            assert float(r["accuracy"]) == st["validation_accuracy"]
        best = json.loads((tmp_path / "ab" / "best.json").read_text())
        assert best["baseline"]["energy_ratio"] == st["validation_energy_ratio"]

    def test_diverging_cell_isolated(self, tmp_path):
        good = write_spec(tmp_path / "g.json", EAT, ablation={"sigmas": [1e-4], "lambdas": [0.5, 1.0]})
        mixed = write_spec(tmp_path / "m.json", EAT, ablation={"sigmas": [1e-4], "lambdas": [0.5, 1e300, 1.0]})
        with np.errstate(all="ignore"):
            assert main(["ablate", "--spec", str(good), "--out", str(tmp_path / "g")]) == EXIT_OK
            assert main(["ablate", "--spec", str(mixed), "--out", str(tmp_path / "m")]) == EXIT_OK
        g = read_csv(tmp_path / "g" / "ablation.csv")
        m = read_csv(tmp_path / "m" / "ablation.csv")
        assert m[1]["status"] == "diverged" and m[1]["energy_ratio"] == ""
        assert [m[0], m[2]] == g

    def test_parallel_matches_serial(self, tmp_path):
        spec = write_spec(tmp_path / "s.json", EAT, ablation={"sigmas": [1e-4], "lambdas": [0, 2.0]})
        main(["ablate", "--spec", str(spec), "--out", str(tmp_path / "a")])
        main(["ablate", "--spec", str(spec), "--out", str(tmp_path / "b"), "--jobs", "2"])
        for name in ("ablation.csv", "best.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_grid(self, tmp_path):
        spec = write_spec(tmp_path / "s.json", EAT)
        assert main(["ablate", "--spec", str(spec), "--out", str(tmp_path / "a")]) == EXIT_CONFIG

    def test_select_best(self):
        rows = [{"status": "ok", "accuracy": 0.95, "energy_ratio": 0.4},
                {"status": "ok", "accuracy": 0.99, "energy_ratio": 0.5},
                {"status": "ok", "accuracy": 0.90, "energy_ratio": 0.2},
                {"status": "diverged", "accuracy": None, "energy_ratio": None}]
        assert experiment.select_best(rows, 0.97)["energy_ratio"] == 0.4
        assert experiment.select_best(rows, 0.97, margin=0.0)["energy_ratio"] == 0.5
        assert experiment.select_best(rows[3:], 0.97) is None


def fake_run(root, name, tag, ratio, acc=0.9, dataset=None):
    d = root / name
    d.mkdir()
    doc = {"tag": tag, "dataset": dataset or {"source": "synthetic"}, "model": {"arch": "small_cnn"},
           "test_accuracy": acc, "test_energy_ratio": ratio}
    (d / "summary.json").write_text(json.dumps(doc))
    return str(d)


class TestReport:
    def test_table_value(self, tmp_path):
        runs = [fake_run(tmp_path, "st", "ST", 0.76), fake_run(tmp_path, "eat", "EAT", 0.55, 0.89)]
        assert main(["report", *runs, "--out", str(tmp_path / "r")]) == EXIT_OK
        rows = read_csv(tmp_path / "r" / "table1.csv")
        assert tuple(rows[0]) == experiment.REPORT_COLUMNS
        assert rows[0]["energy_decrease"] == "27.63"
        assert (rows[0]["st_run"], rows[0]["eat_run"]) == ("st", "eat")

    def test_identical_ratios(self, tmp_path):
        runs = [fake_run(tmp_path, "a", "ST", 0.6), fake_run(tmp_path, "b", "EAT", 0.6)]
        main(["report", *runs, "--out", str(tmp_path / "r")])
        assert read_csv(tmp_path / "r" / "table1.csv")[0]["energy_decrease"] == "0.00"

    def test_ambiguous(self, tmp_path, capsys):
        runs = [fake_run(tmp_path, "a", "ST", 0.6), fake_run(tmp_path, "b", "ST", 0.62),
                fake_run(tmp_path, "c", "EAT", 0.5)]
        assert main(["report", *runs, "--out", str(tmp_path / "r")]) == EXIT_CONFIG
        assert "ambiguous" in capsys.readouterr().err

    def test_mismatched_dataset(self, tmp_path):
        runs = [fake_run(tmp_path, "a", "ST", 0.6),
                fake_run(tmp_path, "b", "EAT", 0.5, dataset={"source": "cifar10"})]
        assert main(["report", *runs, "--out", str(tmp_path / "r")]) == EXIT_CONFIG

    def test_pairs_per_group(self):
        s = lambda tag, src: {"tag": tag, "dataset": {"source": src}, "model": {"arch": "m"}}  # noqa: E731
        pairs = experiment.pair_runs([("a", s("ST", "x")), ("b", s("EAT", "x")), ("c", s("ST", "y")),
                                      ("d", s("sponge", "y"))])
        assert [(p[0][0], p[1][0]) for p in pairs] == [("a", "b"), ("c", "d")]

    def test_missing_summary(self, tmp_path):
        (tmp_path / "x").mkdir()
        (tmp_path / "y").mkdir()
        assert main(["report", str(tmp_path / "x"), str(tmp_path / "y"), "--out", str(tmp_path / "r")]) == EXIT_IO


class TestExitCodes:
    def test_bad_schema(self, tmp_path):
        spec = write_spec(tmp_path / "s.json", schema_version=7)
        assert main(["train", "--spec", str(spec), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert not (tmp_path / "o").exists()

    def test_unknown_key(self, tmp_path):
        spec = write_spec(tmp_path / "s.json", train={"optimizer": "adam"})
        assert main(["train", "--spec", str(spec), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_invalid_json(self, tmp_path):
        (tmp_path / "s.json").write_text("{not json")
        assert main(["train", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_missing_spec(self, tmp_path):
        assert main(["train", "--spec", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == EXIT_IO

    def test_divergence(self, tmp_path):
        spec = write_spec(tmp_path / "s.json", train={"lr_initial": 1e30, "epochs": 3})
        with np.errstate(all="ignore"):
            assert main(["train", "--spec", str(spec), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME

    def test_missing_cifar_files(self, tmp_path):
        spec = write_spec(tmp_path / "s.json", dataset={
            "source": "cifar10", "train_paths": ["missing.bin"], "test_paths": ["missing.bin"]})
        doc = json.loads(spec.read_text())
        for key in ("num_classes", "train_per_class", "test_per_class", "image_size", "channels",
                    "noise_std", "seed"):
            del doc["dataset"][key]
        spec.write_text(json.dumps(doc))
        assert main(["train", "--spec", str(spec), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_spec_round_trip(tmp_path):
    spec = experiment.load_spec(write_spec(tmp_path / "s.json", EAT, ablation={"sigmas": [1e-3], "lambdas": [1]}))
    again = experiment.ExperimentSpec.from_dict(spec.to_dict(), tmp_path)
    assert again == spec


def test_shipped_configs_parse():
    root = Path(__file__).resolve().parents[1] / "configs"
    names = sorted(p.name for p in root.glob("*.json"))
    assert {"st.json", "eat.json", "sponge.json", "ablate.json"} <= set(names)
    for p in root.glob("*.json"):
        spec = experiment.load_spec(p)
        assert spec.train.epochs > 0
    with pytest.raises(ConfigError):
        experiment.ExperimentSpec.from_dict({"schema_version": 1})
