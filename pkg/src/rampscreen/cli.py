"""Command-line entry point: ``rampscreen {train,predict,bench}``.

Outputs (all schemas carry a version line or field):

* ``model.txt``        model text format (see :mod:`rampscreen.cccp`)
* ``metrics.json``     run record; everything under ``"timing"`` is
                       wall-clock and excluded from reproducibility checks
* ``trajectory.csv``   one row per screening checkpoint
* ``trace.csv``        one row per outer iteration
* ``bench.csv``        one row per (dataset, C, kappa, mode, rep) cell
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cccp import MODES, TrainConfig, format_model, load_model, predict_many, train
from .dataio import Dataset, LibsvmParseError, load_libsvm, make_synthetic
from .kernel import KernelSpec
from .screening import TRAJECTORY_FIELDS

log = logging.getLogger("rampscreen")

METRICS_SCHEMA = "rampscreen-metrics v1"
BENCH_SCHEMA = "# rampscreen-bench v1"
BENCH_FIELDS = ("dataset", "C", "kappa", "mode", "rep", "wall_time",
                "screened_fraction_final", "sv_count", "outer_iters", "status")
PREDICT_FIELDS = ("index", "score", "label")


class UsageError(Exception):
    pass


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _csv_text(fields, rows, header_line=None) -> str:
    buf = io.StringIO()
    if header_line:
        buf.write(header_line + "\n")
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def parse_synthetic(text: str):
    """``N[:FLIP[:SEP]]`` -> (n, flip_fraction, separation)."""
    parts = text.split(":")
    try:
        n = int(parts[0])
        flip = float(parts[1]) if len(parts) > 1 else 0.05
        sep = float(parts[2]) if len(parts) > 2 else 6.0
    except ValueError:
        raise UsageError(f"bad --synthetic spec {text!r}; expected N[:FLIP[:SEP]]") from None
    if len(parts) > 3:
        raise UsageError(f"bad --synthetic spec {text!r}; expected N[:FLIP[:SEP]]")
    return n, flip, sep


def load_dataset(path=None, synthetic=None, seed: int = 0):
    """(name, Dataset) from a LIBSVM file or a synthetic spec."""
    if synthetic is not None:
        n, flip, sep = parse_synthetic(synthetic)
        try:
            return f"synthetic-{n}-{flip:g}-{sep:g}", make_synthetic(n, flip, sep, seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return Path(path).stem, load_libsvm(path)


def kernel_from_args(kind: str, gamma) -> KernelSpec:
    if kind == "linear":
        return KernelSpec.linear()
    if gamma is None:
        raise UsageError("--gamma is required for the rbf kernel")
    try:
        return KernelSpec.gaussian(gamma)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def config_from_args(args, C=None, gamma=None, mode=None) -> TrainConfig:
    cfg = TrainConfig(kernel=kernel_from_args(args.kernel, args.gamma if gamma is None else gamma),
                      C=args.C if C is None else C, s=args.s, eps=args.eps,
                      mode=args.mode if mode is None else mode,
                      screen_warmup=args.screen_warmup, screen_every=args.screen_every,
                      handoff_gap=args.handoff_gap, max_outer=args.max_outer,
                      full_matrix_max=args.full_matrix_max)
    try:
        return cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def run_record(name, ds: Dataset, cfg: TrainConfig, model, trace, wall: float, seed: int):
    st = trace.final_state
    scores, labels = predict_many(model, ds.rows)
    # screening counts of the final convex problem
    last = trace.records[-1]
    dyn, prop = last.screened_dynamic, last.screened_propagation
    return {
        "schema": METRICS_SCHEMA,
        "version": __version__,
        "dataset": name,
        "n": ds.n,
        "config": {"kernel": cfg.kernel.kind, "kappa": cfg.kernel.kappa, "C": cfg.C,
                   "s": cfg.s, "eps": cfg.eps, "mode": cfg.mode,
                   "screen_warmup": cfg.screen_warmup, "screen_every": cfg.screen_every,
                   "handoff_gap": cfg.handoff_gap, "seed": seed},
        "results": {
            "status": trace.status,
            "outer_iterations": trace.outer_iterations,
            "inner_iterations": [r.cil_iterations for r in trace.records],
            "final_gap": float(st.gap),
            "sv_count": model.n_sv,
            "ramp_objective": trace.records[-1].ramp_objective,
            "train_accuracy": float(np.mean(labels == ds.y)),
            "screened_fraction": {"dynamic": dyn / ds.n, "propagation": prop / ds.n,
                                  "total": (dyn + prop) / ds.n},
            "kernel_rows": sum(r.kernel_rows for r in trace.records),
        },
        "timing": {"wall_time": wall, "outer_wall_time": [r.wall_time for r in trace.records]},
    }


def cmd_train(args) -> int:
    name, ds = load_dataset(args.data, args.synthetic, args.seed)
    cfg = config_from_args(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    model, trace = train(ds, cfg)
    wall = time.perf_counter() - t0
    record = run_record(name, ds, cfg, model, trace, wall, args.seed)
    _atomic_write(out / "model.txt", format_model(model))
    _atomic_write(out / "metrics.json", json.dumps(record, indent=2, sort_keys=True) + "\n")
    _atomic_write(out / "trajectory.csv", _csv_text(TRAJECTORY_FIELDS, trace.trajectory,
                                                    "# rampscreen-trajectory v1"))
    tmp = out / "trace.csv.tmp"
    trace.write_csv(tmp)
    os.replace(tmp, out / "trace.csv")
    print(f"{name}: mode={cfg.mode} status={trace.status} outer={trace.outer_iterations} "
          f"sv={model.n_sv} gap={trace.final_state.gap:.3e} time={wall:.3f}s -> {out}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    if args.kernel is not None:
        want = kernel_from_args(args.kernel, args.gamma)
        if want != model.kernel:
            raise UsageError(f"kernel mismatch: model has {model.kernel}, flags ask for {want}")
    ds = load_libsvm(args.data)
    scores, labels = predict_many(model, ds.rows)
    rows = [{"index": i, "score": float(s), "label": int(l)}
            for i, (s, l) in enumerate(zip(scores, labels))]
    text = _csv_text(PREDICT_FIELDS, rows, "# rampscreen-predictions v1")
    if args.out:
        _atomic_write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    print(f"accuracy {float(np.mean(labels == ds.y)):.6f}", file=sys.stderr)
    return 0


def _cell_name(dataset, C, kappa, mode, rep) -> str:
    return f"{dataset}_C{C:g}_k{kappa if kappa is None else format(kappa, 'g')}_{mode}_r{rep}"


def cmd_bench(args) -> int:
    datasets = [load_dataset(path=p) for p in args.data or []]
    datasets += [load_dataset(synthetic=s, seed=args.seed) for s in args.synthetic or []]
    if not datasets:
        raise UsageError("bench needs at least one --data or --synthetic")
    gammas = args.gamma if args.kernel == "rbf" else [None]
    out = Path(args.out_dir)
    (out / "trajectories").mkdir(parents=True, exist_ok=True)
    rows = []
    for name, ds in datasets:
        for C in args.C:
            for gamma in gammas:
                for mode in args.modes:
                    cfg = config_from_args(args, C=C, gamma=gamma, mode=mode)
                    for rep in range(args.reps):
                        row = {"dataset": name, "C": float(C), "kappa": gamma, "mode": mode,
                               "rep": rep}
                        try:
                            t0 = time.perf_counter()
                            model, trace = train(ds, cfg)
                            row["wall_time"] = time.perf_counter() - t0
                            st = trace.final_state
                            row.update(screened_fraction_final=st.safe_fixed_count() / ds.n,
                                       sv_count=model.n_sv, outer_iters=trace.outer_iterations,
                                       status="ok" if trace.status == "converged" else trace.status)
                            cell = out / "trajectories" / (_cell_name(name, C, gamma, mode, rep) + ".csv")
                            _atomic_write(cell, _csv_text(TRAJECTORY_FIELDS, trace.trajectory,
                                                          "# rampscreen-trajectory v1"))
                        except Exception as exc:  # one bad cell must not stop the grid
                            log.exception("cell failed")
                            row["status"] = f"error: {type(exc).__name__}: {exc}"
                        rows.append(row)
                        print(",".join(str(row.get(k, "")) for k in BENCH_FIELDS))
    _atomic_write(out / "bench.csv", _csv_text(BENCH_FIELDS, rows, BENCH_SCHEMA))
    return 0


def _positive_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rampscreen", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def training_flags(sp, multi: bool):
        src = sp.add_argument_group("data")
        if multi:
            src.add_argument("--data", action="append", help="LIBSVM file (repeatable)")
            src.add_argument("--synthetic", action="append", metavar="N[:FLIP[:SEP]]",
                             help="synthetic two-cluster data (repeatable)")
        else:
            g = src.add_mutually_exclusive_group(required=True)
            g.add_argument("--data", help="LIBSVM file")
            g.add_argument("--synthetic", metavar="N[:FLIP[:SEP]]",
                           help="synthetic two-cluster data, default FLIP=0.05 SEP=6")
        sp.add_argument("--kernel", choices=("linear", "rbf"), default="rbf")
        sp.add_argument("--gamma", type=float, nargs="+" if multi else None,
                        default=[0.5] if multi else 0.5, help="Gaussian kernel width kappa")
        sp.add_argument("--C", type=float, nargs="+" if multi else None,
                        default=[1.0] if multi else 1.0)
        sp.add_argument("--s", type=float, default=0.0, help="ramp parameter, <= 0")
        sp.add_argument("--eps", type=float, default=1e-8, help="KKT violation tolerance")
        if multi:
            sp.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
            sp.add_argument("--reps", type=_positive_int, default=1)
        else:
            sp.add_argument("--mode", choices=MODES, default="safe")
        sp.add_argument("--screen-warmup", type=_positive_int, default=50)
        sp.add_argument("--screen-every", type=_positive_int, default=10)
        sp.add_argument("--handoff-gap", type=float, default=1e-4,
                        help="gap at which shrink+safe stops screening")
        sp.add_argument("--max-outer", type=int, default=20)
        sp.add_argument("--full-matrix-max", type=int, default=6000,
                        help="largest n for which the Gram matrix is held in memory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-dir", default="rampscreen-out")

    training_flags(sub.add_parser("train", help="train one model"), multi=False)
    training_flags(sub.add_parser("bench", help="run a dataset x C x kappa x mode grid"),
                   multi=True)
    pp = sub.add_parser("predict", help="score a LIBSVM file with a saved model")
    pp.add_argument("--model", required=True)
    pp.add_argument("--data", required=True)
    pp.add_argument("--out", help="predictions CSV (default: stdout)")
    pp.add_argument("--kernel", choices=("linear", "rbf"),
                    help="expected kernel; error if the model differs")
    pp.add_argument("--gamma", type=float)
    return p


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rampscreen: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, LibsvmParseError, ValueError, ArithmeticError) as exc:
        print(f"rampscreen: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
