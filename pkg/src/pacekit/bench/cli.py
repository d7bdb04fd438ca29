"""Command line entry point.

Exit codes: 0 success, 2 malformed input, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from ..core import InvalidInput, Keypoints2D, Keypoints3D, PaceError
from ..gnc import Problem, RobustConfig, Scheme, Solver2D, pace_sharp, robust_solve
from ..pace2d import pace2d_star, refine_reprojection
from ..pace3d import pace3d_star
from ..robin import (
    Pair3D,
    Triplet2D,
    build_winding_dictionary_lp,
    compute_pair_bounds,
    learn_winding_dictionary,
    robin,
)
from . import io
from .experiment import plot_series, run_experiment, write_csv

EXIT_OK, EXIT_PARSE, EXIT_SOLVER = 0, 2, 3


def result_to_json(est):
    info = {}
    for k, v in est.info.items():
        if isinstance(v, np.ndarray):
            v = v.tolist()
        try:
            json.dumps(v)
        except TypeError:
            continue
        info[k] = v
    return {
        "R": est.R.tolist(),
        "t": est.t.tolist(),
        "c": est.c.tolist(),
        "gap": None if np.isnan(est.gap) else est.gap,
        "cost": est.cost,
        "status": est.status.value,
        "weights": est.weights.tolist(),
        "info": info,
    }


def _emit(doc, out):
    text = json.dumps(doc, indent=1)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _expect(meas, kind, path):
    if not isinstance(meas, kind):
        want = "points3d" if kind is Keypoints3D else "pixels"
        raise io.ParseError(path, want, "missing")
    return meas


def _robust_cfg(args):
    return RobustConfig(beta=args.beta, scheme=Scheme(args.scheme), seed=args.seed)


def cmd_solve3d(args):
    lib = io.read_library(args.library)
    meas = _expect(io.read_measurements(args.measurements), Keypoints3D, args.measurements)
    if meas.N != lib.N:
        raise io.ParseError(args.measurements, "points3d", f"expected {lib.N} points, got {meas.N}")
    if args.robust:
        est = pace_sharp(Problem.THREE_D, lib, meas, _robust_cfg(args), lam=args.lam)
    else:
        est = pace3d_star(lib, meas, lam=args.lam)
    _emit(result_to_json(est), args.out)


def cmd_solve2d(args):
    lib = io.read_library(args.library)
    meas = _expect(io.read_measurements(args.measurements), Keypoints2D, args.measurements)
    if meas.N != lib.N:
        raise io.ParseError(args.measurements, "pixels", f"expected {lib.N} pixels, got {meas.N}")
    lam = 0.01 if args.lam is None else args.lam
    if args.robust:
        cfg = _robust_cfg(args)
        if args.dictionaries:
            dicts = io.read_dictionaries(args.dictionaries)
            est = pace_sharp(Problem.TWO_D, lib, meas, cfg, lam=lam, prior=dicts)
        else:
            est = robust_solve(Solver2D(lib, meas, lam), cfg)
    else:
        est = pace2d_star(lib, meas, lam=lam)
        if args.refine:
            est = refine_reprojection(est, lib, meas, lam)
    _emit(result_to_json(est), args.out)


def cmd_robin(args):
    meas = io.read_measurements(args.measurements)
    if args.mode == "pair3d":
        if not args.library:
            raise io.ParseError("<args>", "library", "pair3d mode needs --library")
        lib = io.read_library(args.library)
        _expect(meas, Keypoints3D, args.measurements)
        res = robin(meas, Pair3D(compute_pair_bounds(lib), args.beta))
    else:
        if not args.dictionaries:
            raise io.ParseError("<args>", "dictionaries", "triplet2d mode needs --dictionaries")
        _expect(meas, Keypoints2D, args.measurements)
        res = robin(meas, Triplet2D(tuple(io.read_dictionaries(args.dictionaries))))
    _emit({"inliers": res.inliers.tolist(), "degenerate": res.degenerate}, args.out)


def cmd_winding_dict(args):
    if args.method == "lp":
        dicts = [build_winding_dictionary_lp(model, kp) for model, kp in io.read_shape_models(args.shape)]
    else:
        N, annotated = io.read_annotations(args.shape)
        dicts = [learn_winding_dictionary(N, annotated)]
    if args.out:
        io.write_dictionaries(dicts, args.out)
    else:
        _emit({"dictionaries": [io.dictionary_to_json(d) for d in dicts]}, None)


def _bench(problem):
    def run(args):
        grid = io.read_grid(args.grid)
        try:
            records = run_experiment(
                grid, args.trials, seed=args.seed, problem=problem, timing=args.timing, jobs=args.jobs
            )
        except (KeyError, TypeError, ValueError, InvalidInput) as exc:
            raise io.ParseError(args.grid, "<grid>", str(exc)) from exc
        if args.out:
            write_csv(records, args.out)
        else:
            write_csv(records, sys.stdout)
        if args.plot_data:
            with open(args.plot_data, "w") as fh:
                json.dump(plot_series(records, grid), fh, indent=1)
                fh.write("\n")

    return run


def build_parser():
    p = argparse.ArgumentParser(prog="pacekit", description="Category-level pose and shape estimation.")
    sub = p.add_subparsers(dest="command", required=True)

    def robust_opts(sp):
        sp.add_argument("--robust", action="store_true", help="prune with ROBIN and solve robustly")
        sp.add_argument("--beta", type=float, default=0.05, help="inlier threshold")
        sp.add_argument("--scheme", choices=[s.value for s in Scheme], default=Scheme.GNC_TLS.value)
        sp.add_argument("--seed", type=int, default=0, help="RANSAC seed")
        sp.add_argument("--lambda", dest="lam", type=float, default=None, help="shape regularization")
        sp.add_argument("--out", help="write JSON here instead of stdout")

    s3 = sub.add_parser("solve3d", help="3D-3D pose and shape")
    s3.add_argument("--library", required=True)
    s3.add_argument("--measurements", required=True)
    robust_opts(s3)
    s3.set_defaults(func=cmd_solve3d)

    s2 = sub.add_parser("solve2d", help="2D-3D pose and shape")
    s2.add_argument("--library", required=True)
    s2.add_argument("--measurements", required=True)
    s2.add_argument("--dictionaries", help="winding dictionaries for ROBIN (with --robust)")
    s2.add_argument("--refine", action="store_true", help="refine on the reprojection error")
    robust_opts(s2)
    s2.set_defaults(func=cmd_solve2d)

    r = sub.add_parser("robin", help="outlier pruning only")
    r.add_argument("--mode", choices=["pair3d", "triplet2d"], required=True)
    r.add_argument("--measurements", required=True)
    r.add_argument("--library")
    r.add_argument("--dictionaries")
    r.add_argument("--beta", type=float, default=0.05)
    r.add_argument("--out")
    r.set_defaults(func=cmd_robin)

    w = sub.add_parser("winding-dict", help="build winding dictionaries")
    w.add_argument("--shape", required=True, help="shape models (lp) or annotations (learn)")
    w.add_argument("--method", choices=["lp", "learn"], default="lp")
    w.add_argument("--out")
    w.set_defaults(func=cmd_winding_dict)

    for name, problem in (("bench3d", "3d"), ("bench2d", "2d")):
        b = sub.add_parser(name, help=f"Monte Carlo sweep ({problem.upper()})")
        b.add_argument("--grid", required=True)
        b.add_argument("--out")
        b.add_argument("--trials", type=int, default=10)
        b.add_argument("--seed", type=int, default=0)
        b.add_argument("--timing", action="store_true", help="record wall-clock runtimes")
        b.add_argument("--jobs", type=int, default=1, help="worker processes")
        b.add_argument("--plot-data", help="also write median rotation error series as JSON")
        b.set_defaults(func=_bench(problem))
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except io.ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (PaceError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
