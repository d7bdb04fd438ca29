"""Monte Carlo sweeps over synthetic instances.

Every configuration in a grid is paired with every method. Instances are
generated from a seed derived from (base seed, configuration index, trial), so
all methods of a configuration see the same data and a sweep is a pure
function of its inputs.
"""

from __future__ import annotations

import contextlib
import csv
import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..core import PaceError, errors
from ..gnc import (
    Problem,
    RobustConfig,
    Scheme,
    Solver2D,
    Solver3D,
    altern,
    gnc_tls,
    irls,
    mean_shape_pnp,
    minimal_solver_2d,
    minimal_solver_3d,
    pace_sharp,
    ransac,
)
from ..pace2d import pace2d_star
from ..pace3d import default_lambda, pace3d_star
from ..robin import Pair3D, build_winding_dictionary_lp, compute_pair_bounds, robin
from .synth import SynthConfig2D, SynthConfig3D, gen_synthetic_2d, gen_synthetic_3d


@dataclass
class TrialRecord:
    method: str
    config: int
    trial: int
    seed: int
    N: int
    K: int
    sigma: float
    outlier_rate: float
    radius: float  # intra-class radius (3D) or camera radius (2D)
    beta: float
    mu_update: float
    rot_err_deg: float = math.nan
    trans_err: float = math.nan
    shape_err: float = math.nan
    gap: float = math.nan
    runtime_s: float = math.nan
    clique_inlier_rate: float = math.nan
    status: str = "Failed"
    message: str = ""


CSV_COLUMNS = [f.name for f in fields(TrialRecord)]


def trial_seed(base_seed, config_index, trial):
    return int(np.random.SeedSequence([base_seed, config_index, trial]).generate_state(1)[0])


def expand_grid(grid):
    """List of config-field dicts, in the order given by grid["vary"]."""
    vary = grid.get("vary", {})
    keys = list(vary)
    out = []
    for values in itertools.product(*(vary[k] for k in keys)):
        cfg = dict(grid.get("base", {}))
        cfg.update(zip(keys, values))
        out.append(cfg)
    return out


def _clique_rate(keep, inlier):
    return float(np.mean(inlier[keep])) if len(keep) else math.nan


# ------------------------------------------------------------------ 3D

def _run_3d(method, lib, meas, inlier, cfg):
    beta = cfg.beta
    rate = math.nan
    if method == "pace3d":
        est = pace3d_star(lib, meas)
    elif method == "altern":
        est = altern(lib, meas)
    elif method == "pace3d_sharp":
        est = pace_sharp(Problem.THREE_D, lib, meas, cfg)
        rate = _clique_rate(est.info["robin_inliers"], inlier)
    elif method == "gnc":
        est = gnc_tls(Solver3D(lib, meas), cfg)
    elif method == "irls_gm":
        est = irls(Solver3D(lib, meas), "GM", cfg)
    elif method == "irls_tls":
        est = irls(Solver3D(lib, meas), "TLS", cfg)
    elif method == "ransac":
        est = ransac(minimal_solver_3d(lib, meas), Solver3D(lib, meas), meas.N, cfg, 5)
    elif method == "clique_pace3d":
        keep = robin(meas, Pair3D(compute_pair_bounds(lib), beta)).inliers
        rate = _clique_rate(keep, inlier)
        est = pace3d_star(lib.subset(keep), meas.subset(keep), lam=default_lambda(lib.K, lib.N))
    else:
        raise KeyError(method)
    return est, rate


METHODS_3D = ("pace3d", "altern", "pace3d_sharp", "gnc", "irls_gm", "irls_tls", "ransac", "clique_pace3d")


# ------------------------------------------------------------------ 2D

def _run_2d(method, lib, models, meas, inlier, cfg):
    rate = math.nan
    if method == "pace2d":
        est = pace2d_star(lib, meas)
    elif method == "pace2d_sharp":
        dicts = [build_winding_dictionary_lp(m, lib.keypoints[k]) for k, m in enumerate(models)]
        est = pace_sharp(Problem.TWO_D, lib, meas, cfg, prior=dicts)
        rate = _clique_rate(est.info["robin_inliers"], inlier)
    elif method == "gnc":
        est = gnc_tls(Solver2D(lib, meas), cfg)
    elif method == "ransac":
        est = ransac(minimal_solver_2d(lib, meas), Solver2D(lib, meas), meas.N, cfg, 4)
    elif method == "mspnp":
        est = mean_shape_pnp(lib, meas)
    else:
        raise KeyError(method)
    return est, rate


METHODS_2D = ("pace2d", "pace2d_sharp", "gnc", "ransac", "mspnp")


# ------------------------------------------------------------------ sweep

def _run_cell(problem, fields_, ci, trial, s, methods, beta, mu_update, timing):
    """All methods on one generated instance."""
    if problem == "3d":
        cfg = SynthConfig3D(**{**fields_, "seed": s})
        lib, meas, truth, inlier = gen_synthetic_3d(cfg)
        radius = cfg.intra_class_radius
    else:
        cfg = SynthConfig2D(**{**fields_, "seed": s})
        lib, models, meas, truth, inlier = gen_synthetic_2d(cfg)
        radius = cfg.camera_radius
    robust = RobustConfig(beta=beta, mu_update=mu_update, seed=s)
    out = []
    for method in methods:
        rec = TrialRecord(method, ci, trial, s, cfg.N, cfg.K, cfg.sigma, cfg.outlier_rate, radius, beta, mu_update)
        t0 = time.perf_counter()
        try:
            if problem == "3d":
                est, rate = _run_3d(method, lib, meas, inlier, robust)
            else:
                est, rate = _run_2d(method, lib, models, meas, inlier, robust)
        except (PaceError, np.linalg.LinAlgError) as exc:
            rec.message = f"{type(exc).__name__}: {exc}"
        else:
            rec.rot_err_deg, rec.trans_err, rec.shape_err = errors(est, truth)
            rec.gap = est.gap
            rec.clique_inlier_rate = rate
            rec.status = est.status.value
        if timing:
            rec.runtime_s = time.perf_counter() - t0
        out.append(rec)
    return out


def run_experiment(grid, trials, seed=0, problem="3d", timing=False, progress=None, jobs=1):
    """Run every (configuration, method, trial) cell and return TrialRecords.

    Failures of a cell are recorded as rows with status "Failed" and the
    error message; they never abort the sweep. runtime_s is only filled in
    when timing is requested, so that default output is reproducible.
    With jobs > 1 instances are solved in worker processes; records come
    back in the same order as a sequential run.
    """
    problem = problem.lower()
    if problem not in ("3d", "2d"):
        raise ValueError("problem must be '3d' or '2d'")
    known = METHODS_3D if problem == "3d" else METHODS_2D
    methods = list(grid["methods"])
    for m in methods:
        if m not in known:
            raise KeyError(f"unknown {problem} method {m!r}; choose from {', '.join(known)}")
    if jobs < 1:
        raise ValueError("jobs must be at least 1")
    beta = grid.get("beta", 0.05)
    mu_update = grid.get("mu_update", RobustConfig.mu_update)
    configs = expand_grid(grid)
    # validate every configuration before any work starts
    Synth = SynthConfig3D if problem == "3d" else SynthConfig2D
    for fields_ in configs:
        Synth(**fields_)
    cells = [
        (problem, fields_, ci, trial, trial_seed(seed, ci, trial), methods, beta, mu_update, timing)
        for ci, fields_ in enumerate(configs)
        for trial in range(trials)
    ]
    records = []
    with contextlib.ExitStack() as stack:
        if jobs == 1 or len(cells) < 2:
            results = (_run_cell(*c) for c in cells)
        else:
            pool = stack.enter_context(ProcessPoolExecutor(max_workers=jobs))
            results = pool.map(_run_cell, *zip(*cells))
        for batch in results:
            for rec in batch:
                records.append(rec)
                if progress:
                    progress(rec)
    return records


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _write_rows(records, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        d = asdict(r)
        w.writerow([_fmt(d[c]) for c in CSV_COLUMNS])


def write_csv(records, path_or_file):
    """CSV with the fixed column order CSV_COLUMNS; floats at full precision."""
    if isinstance(path_or_file, str):
        with open(path_or_file, "w", newline="") as fh:
            _write_rows(records, fh)
    else:
        _write_rows(records, path_or_file)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(records, key="rot_err_deg"):
    """Median of `key` per (config, method), ignoring failed rows."""
    groups = {}
    for r in records:
        v = getattr(r, key)
        if r.status != "Failed" and not math.isnan(v):
            groups.setdefault((r.config, r.method), []).append(v)
    return {k: float(np.median(v)) for k, v in groups.items()}


def plot_series(records, grid, key="rot_err_deg"):
    """Median `key` per method against the first varied field, as x/y lists.

    With nothing varied the x axis is the configuration index.
    """
    vary = list(grid.get("vary", {}))
    configs = expand_grid(grid)
    xname = vary[0] if vary else "config"
    medians = summarize(records, key)
    series = {}
    for (ci, method), value in sorted(medians.items()):
        s = series.setdefault(method, {"x": [], "y": []})
        s["x"].append(configs[ci][xname] if vary else ci)
        s["y"].append(value)
    return {"x_label": xname, "y_label": key, "series": series}


__all__ = [
    "CSV_COLUMNS",
    "METHODS_2D",
    "METHODS_3D",
    "Scheme",
    "TrialRecord",
    "expand_grid",
    "plot_series",
    "read_csv",
    "run_experiment",
    "summarize",
    "trial_seed",
    "write_csv",
]
