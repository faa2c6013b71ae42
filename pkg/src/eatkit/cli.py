"""Command-line entry point: ``eatkit {train,energy,ablate,report}``.

Exit codes: 0 success, 1 configuration error, 2 runtime/divergence error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from . import experiment
from .errors import CheckpointError, ConfigError, DatasetError, DivergenceError, NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("eatkit")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eatkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model (ST, EAT or sponge per the spec's penalty)")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("energy", help="simulate zero-skipping energy of a checkpoint")
    p.add_argument("--spec", required=True, help="spec providing the dataset and cost model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test", "validation"), default="test")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("ablate", help="sigma x lambda grid on the validation split")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("report", help="ST vs EAT comparison table from run directories")
    p.add_argument("runs", nargs="+", help="directories holding summary.json")
    p.add_argument("--out", required=True)
    return parser


def _dispatch(args) -> None:
    if args.command == "train":
        spec = experiment.load_spec(args.spec, args.seed)
        summary = experiment.run_train(spec, args.out)
        print(json.dumps({k: summary[k] for k in ("tag", "test_accuracy", "test_energy_ratio")}))
    elif args.command == "energy":
        spec = experiment.load_spec(args.spec, args.seed)
        doc = experiment.run_energy(spec, args.checkpoint, args.out, args.split)
        print(json.dumps({"accuracy": doc["accuracy"], "ratio": doc["total"]["ratio"]}))
    elif args.command == "ablate":
        spec = experiment.load_spec(args.spec, args.seed)
        rows = experiment.run_ablate(spec, args.out, jobs=args.jobs)
        print(f"{len(rows)} cells written to {args.out}/ablation.csv")
    elif args.command == "report":
        rows = experiment.run_report(args.runs, args.out)
        print(f"{len(rows)} pairs written to {args.out}/table1.csv")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, DatasetError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
