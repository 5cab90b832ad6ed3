"""Command-line entry point: ``plumeinv <stage> [options]``.

Exit codes: 0 success, 2 usage or validation error, 3 runtime or data error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import experiment as ex
from .errors import DomainError, PlumeInvError, ValidationError
from .mlp import TOPOLOGIES

TOPOLOGY_CHOICES = [":".join(map(str, t)) for t in TOPOLOGIES.values()]


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON experiment configuration")
    parser.add_argument("--seed", type=int, help="master random seed")
    parser.add_argument("--out", type=Path, default=Path("run"), help="working directory (default: ./run)")
    parser.add_argument("--noise", type=float, help="relative noise level (0.05 and 0.10 in the reference runs)")
    parser.add_argument("--topology", choices=TOPOLOGY_CHOICES, help="MLP layer sizes")
    parser.add_argument("--direction", choices=["forward", "backward"], help="dispersion integration direction")
    parser.add_argument("--particles", type=int, help="particles released per source (or receptor)")
    parser.add_argument("--workers", type=int, help="worker processes for the dispersion stage")
    parser.add_argument("--epochs", type=int, help="training epochs")
    parser.add_argument("--meteorology", type=Path, help="wind record file (default: bundled table)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plumeinv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "run the particle model and write detection counts",
        "matrix": "build the source-receptor matrix from the counts",
        "synth": "write the noisy observation and the training/activation/generalization sets",
        "train": "train the MLP for one topology",
        "invert": "estimate emission rates with the ANN, quasi-Newton and PSO",
        "compare": "write the comparison table and per-solver grid files",
        "run": "all stages in order",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _common(p)
        if name == "invert":
            p.add_argument("--solvers", default="ann,qn,pso", help="comma-separated subset of ann,qn,pso")
        if name == "run":
            p.add_argument("--all-topologies", action="store_true", help="train and invert all three topologies")
    return parser


def load_config(args) -> ex.ExperimentConfig:
    config = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    overrides = {
        "seed": args.seed, "noise": args.noise, "topology": args.topology, "direction": args.direction,
        "particles": args.particles, "workers": args.workers, "epochs": args.epochs,
        "meteorology": str(args.meteorology) if args.meteorology else None,
    }
    changes = {k: v for k, v in overrides.items() if v is not None}
    return config.replace(**changes) if changes else config


def _print_report(report: ex.InversionReport) -> None:
    names = list(report.estimates)
    print("cell   exact " + " ".join(f"{n:>16s}" for n in names))
    for k, cell in enumerate(report.cells):
        print(f"{cell:5s} {report.exact[k]:6.2f} " + " ".join(f"{report.estimates[n][k]:16.2f}" for n in names))
    for name, (mre, rms) in report.metrics.items():
        print(f"{name:16s} max relative error {mre:.4f}  rms error {rms:.4f}")


def run_command(args) -> int:
    config = load_config(args)
    out = args.out
    t0 = time.perf_counter()
    cmd = args.command
    if cmd == "simulate":
        path, counts = ex.run_simulate(config, out)
        n = int(counts.released.sum())
        print(f"{counts.direction} run: {n} particles from {len(counts.releaser_ids)} releasers, "
              f"{int(counts.counts.sum())} detections -> {path} ({time.perf_counter() - t0:.1f} s)")
    elif cmd == "matrix":
        path, M = ex.run_matrix(config, out, args.direction)
        print(f"{M.shape[0]}x{M.shape[1]} transition matrix -> {path}")
    elif cmd == "synth":
        paths = ex.run_synth(config, out)
        for name, p in paths.items():
            print(f"{name}: {p}")
    elif cmd == "train":
        path, net, history = ex.run_train(config, out)
        best = history.best_epoch
        print(f"trained {net.topology} for {net.epochs_trained} epochs"
              + (f", kept epoch {best}" if best and config.training_config().restore_best else "")
              + f" -> {path} ({time.perf_counter() - t0:.1f} s)")
    elif cmd == "invert":
        solvers = [s.strip() for s in args.solvers.split(",") if s.strip()]
        bad = sorted(set(solvers) - {"ann", "qn", "pso"})
        if bad:
            raise ValidationError(f"unknown solvers {bad}")
        for run in ex.run_invert(config, out, solvers):
            print(f"{run.name:16s} {np.array2string(run.rates, precision=2)}  {run.seconds * 1e3:.2f} ms"
                  + (f"  ({run.note})" if run.note else ""))
    elif cmd == "compare":
        report = ex.run_compare(config, out)
        _print_report(report)
    elif cmd == "run":
        topologies = TOPOLOGY_CHOICES if args.all_topologies else None
        report = ex.run_all(config, out, topologies)
        _print_report(report)
        print(f"total {time.perf_counter() - t0:.1f} s")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run_command(args)
    except (ValidationError, DomainError, FileNotFoundError) as exc:
        print(f"plumeinv {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (PlumeInvError, OSError, ValueError) as exc:
        print(f"plumeinv {args.command}: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
