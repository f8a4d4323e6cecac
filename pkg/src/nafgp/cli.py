"""Command-line driver: ``nafgp {simulate,fit,predict,diagnose}``.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
failures while running.
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from . import io as fio
from .covariance import MaternParams
from .diagnostics import score_arrays, score_table
from .likelihood import FitError, fit
from .prediction import krig
from .simulation import FixedWarping, SimulationSpec, simulate_field
from .types import SpatialDataset, make_grid, standardize

log = logging.getLogger("nafgp")


class UsageError(Exception):
    pass


def _out_path(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _config(args) -> fio.RunConfig:
    try:
        cfg = fio.load_config(args.config)
    except fio.ConfigError as exc:
        raise UsageError(f"config: {exc}") from exc
    if args.seed is not None:
        cfg.set("fit.seed", args.seed)
        cfg.set("simulate.seed", args.seed)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _config(args)
    s = cfg.values["simulate"]
    try:
        counts = s["counts"]
        grid = make_grid([(s["lo"], s["hi"])] * len(counts), counts)
        warp = FixedWarping.spiral(s["a"], s["b"]) if s["warping"] == "spiral" else FixedWarping.identity()
        spec = SimulationSpec(grid, warp, MaternParams(s["sigma"], s["range"], s["smoothness"]),
                              s["nugget_var"], s["n"], s["seed"])
    except ValueError as exc:
        raise UsageError(f"simulate: {exc}") from exc
    res = simulate_field(spec)
    names = [f"s{i + 1}" for i in range(grid.d)]
    paths = {
        "grid": _out_path(args, "grid_truth.csv"),
        "train": _out_path(args, "train.csv"),
        "test": _out_path(args, "test.csv"),
    }
    fio.write_observations(paths["grid"], res.grid_points, res.y, names, "y")
    fio.write_observations(paths["train"], res.data.locations, res.data.values, names, "value")
    fio.write_observations(paths["test"], res.grid_points[res.test_idx], res.y[res.test_idx], names, "y")
    for k, p in paths.items():
        print(f"{k}: {p}")
    print(f"grid points {grid.n_points}, train {res.data.n}, test {res.test_idx.size}, "
          f"field mean {res.y.mean():.4f}, field sd {res.y.std():.4f}")
    return 0


def cmd_fit(args) -> int:
    cfg = _config(args)
    data = fio.read_observations(args.train)
    transform = None
    if cfg["fit.standardize"] == "yes":
        unit, transform = standardize(data.locations, data.axis_names)
        data = SpatialDataset(unit, data.values, data.axis_names)
    try:
        spec = cfg.model_spec(data.d)
        fcfg = cfg.fit_config()
    except ValueError as exc:
        raise UsageError(f"config: {exc}") from exc

    def progress(row):
        log.info("iter %d %s loglik %.6f delta %.3g", row.iteration, row.stage, row.loglik, row.delta_norm)

    model = fit(data, spec, fcfg, callback=progress)
    mpath = _out_path(args, "model.json")
    tpath = _out_path(args, "trace.csv")
    fio.save_model(mpath, model, transform)
    with open(tpath, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(model.trace_table())
    print(f"model: {mpath}")
    print(f"trace: {tpath}")
    print(f"loglik {model.loglik!r}, outer iterations {model.n_outer}, "
          f"{'converged' if model.converged else 'not converged'}")
    return 0


def _parse_grid(text: str):
    # "lo,hi,count;lo,hi,count"
    try:
        axes = [tuple(float(v) for v in part.split(",")) for part in text.split(";") if part.strip()]
        if any(len(a) != 3 for a in axes):
            raise ValueError
        return make_grid([(a[0], a[1]) for a in axes], [int(a[2]) for a in axes])
    except ValueError as exc:
        raise UsageError(f"--grid expects 'lo,hi,count;...', got {text!r}") from exc


def cmd_predict(args) -> int:
    cfg = _config(args)
    model, transform = fio.load_model(args.model)
    d = model.data.d
    names = list(model.data.axis_names) if model.data.axis_names else [f"s{i + 1}" for i in range(d)]
    if args.targets and args.grid:
        raise UsageError("give either --targets or --grid, not both")
    if args.targets:
        header, targets = fio.read_locations(args.targets, d)
        names = header
    else:
        if args.grid:
            grid = _parse_grid(args.grid)
        else:
            p = cfg.values["predict"]
            if not p["counts"]:
                raise UsageError("no targets: pass --targets, --grid or a [predict] grid in the config")
            try:
                grid = make_grid(list(zip(p["lo"], p["hi"])), p["counts"])
            except ValueError as exc:
                raise UsageError(f"[predict] grid: {exc}") from exc
        if grid.d != d:
            raise UsageError(f"grid is {grid.d}-dimensional, model is {d}-dimensional")
        targets = grid.points()
    kind = args.target_kind or cfg["predict.target_kind"]
    unit = transform.apply(targets) if transform is not None else targets
    preds = krig(model, unit, kind)
    path = _out_path(args, "predictions.csv")
    fio.write_table(path, list(names) + ["mean", "std_error", "lower", "upper"],
                    list(targets.T) + [preds.mean, preds.std_error, preds.lower, preds.upper])
    print(f"predictions: {path} ({len(preds)} rows, {kind})")
    return 0


def cmd_diagnose(args) -> int:
    th, truth = fio.read_table(args.truth)
    ph, pred = fio.read_table(args.predictions)
    need = ["mean", "lower", "upper"]
    missing = [c for c in need if c not in ph]
    if missing:
        raise fio.ParseError(f"{args.predictions}: missing columns {', '.join(missing)}")
    if truth.shape[0] != pred.shape[0]:
        raise fio.ParseError(f"{args.truth} has {truth.shape[0]} rows but "
                             f"{args.predictions} has {pred.shape[0]}")
    d = truth.shape[1] - 1
    if not np.allclose(truth[:, :d], pred[:, :d], rtol=0, atol=1e-9):
        raise fio.ParseError("truth and prediction rows are at different locations")
    col = {c: pred[:, ph.index(c)] for c in need}
    rep = score_arrays(truth[:, -1], col["mean"], col["lower"], col["upper"], label=args.label)
    table = score_table([rep])
    path = _out_path(args, "scores.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table)
    sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="overrides the seeds in the config")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    common.add_argument("--out", default=".", help="output directory (default .)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nafgp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="simulate a warped field")
    s.set_defaults(func=cmd_simulate)
    f = sub.add_parser("fit", parents=[common], help="fit a model to a training CSV")
    f.add_argument("train")
    f.set_defaults(func=cmd_fit)
    r = sub.add_parser("predict", parents=[common], help="krige at targets")
    r.add_argument("model")
    r.add_argument("--targets", help="CSV of target coordinates")
    r.add_argument("--grid", help="grid as 'lo,hi,count;lo,hi,count'")
    r.add_argument("--target-kind", choices=("process", "data"))
    r.set_defaults(func=cmd_predict)
    g = sub.add_parser("diagnose", parents=[common], help="score predictions against truth")
    g.add_argument("truth")
    g.add_argument("predictions")
    g.add_argument("--label", default="model")
    g.set_defaults(func=cmd_diagnose)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    import torch
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (fio.ParseError, fio.ArchiveError, FitError, OSError, ValueError, RuntimeError,
            np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
