"""Robust estimation on top of the certifiable solvers.

GNC with the truncated least squares loss, IRLS (Geman-McClure or TLS),
RANSAC, the alternating-minimization baseline, and the full pipeline that
prunes with ROBIN before running GNC.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import (
    EstimationResult,
    InvalidInput,
    PaceError,
    Pose,
    Rotation,
    ShapeCoeffs,
    ShapeLibrary,
    Status,
    project_to_so3,
)
from .optkernels import solve_sdp
from .pace2d import (
    DEFAULT_LAMBDA,
    build_bearing_data,
    closed_form_translation_2d,
    pace2d_star,
    point_to_line_cost,
    refine_reprojection,
    reprojection_residuals,
)
from .pace3d import (
    RotationQcqp,
    center_data,
    default_lambda,
    optimal_translation,
    pace3d_star,
    registration_cost,
    residuals_3d,
    rotate_back,
    rotation_sdp,
    shape_closed_form,
    shape_operator,
)
from .robin import Pair3D, Triplet2D, compute_pair_bounds, robin

MIN_INLIERS_3D = 3
MIN_INLIERS_2D = 4


class RobustFailure(PaceError):
    pass


class Scheme(str, Enum):
    GNC_TLS = "GncTls"
    IRLS_GM = "IrlsGm"
    IRLS_TLS = "IrlsTls"
    RANSAC = "Ransac"


class Problem(str, Enum):
    THREE_D = "ThreeD"
    TWO_D = "TwoD"


@dataclass(frozen=True)
class RobustConfig:
    beta: float
    mu_update: float = 1.4
    max_iters: int = 100
    conv_tol: float = 1e-6
    scheme: Scheme = Scheme.GNC_TLS
    seed: int = 0

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidInput("beta must be positive")
        if not self.mu_update > 1:
            raise InvalidInput("mu_update must exceed 1")
        object.__setattr__(self, "scheme", Scheme(self.scheme))


# ---------------------------------------------------------- inner solvers

class WeightedSolver:
    """Callable mapping per-measurement weights to an EstimationResult."""

    min_inliers = MIN_INLIERS_3D

    def __call__(self, weights):
        raise NotImplementedError

    def residuals(self, est):
        raise NotImplementedError

    def inner_cost(self, est, weights):
        """Objective of the weighted solve, evaluated at est."""
        w = _rescaled(weights)
        on = w > 0
        r = self.residuals(est)[on]
        return float(w[on] @ (r * r) + self.lam * est.c @ est.c)


def _rescaled(weights):
    # the regularizer is not scale invariant: w -> a w acts like lam -> lam / a
    w = np.asarray(weights, dtype=float)
    top = w.max() if w.size else 0.0
    return w / top if top > 0 else w


class Solver3D(WeightedSolver):
    min_inliers = MIN_INLIERS_3D

    def __init__(self, lib, meas, lam=None):
        self.lib, self.meas = lib, meas
        self.lam = default_lambda(lib.K, lib.N) if lam is None else lam

    def __call__(self, weights):
        return pace3d_star(self.lib, self.meas.with_weights(_rescaled(weights)), self.lam)

    def residuals(self, est):
        return residuals_3d(self.lib, self.meas, est)


class Solver2D(WeightedSolver):
    """PACE2D* followed by reprojection refinement on the same weights."""

    min_inliers = MIN_INLIERS_2D

    def __init__(self, lib, meas, lam=DEFAULT_LAMBDA, refine=True, tol=1e-9):
        self.lib, self.meas, self.lam, self.refine, self.tol = lib, meas, lam, refine, tol

    def __call__(self, weights):
        meas = self.meas.with_weights(_rescaled(weights))
        est = pace2d_star(self.lib, meas, self.lam, tol=self.tol)
        if self.refine:
            est = refine_reprojection(est, self.lib, meas, self.lam)
        return est

    def residuals(self, est):
        return reprojection_residuals(self.lib, self.meas, est)

    def inner_cost(self, est, weights):
        if self.refine:
            return super().inner_cost(est, weights)
        bd = build_bearing_data(self.meas.with_weights(_rescaled(weights)))
        return point_to_line_cost(self.lib, bd, est.R, est.t, est.c, self.lam)


# ---------------------------------------------------------------- GNC-TLS

def tls_weights(r, beta, mu):
    r2 = np.asarray(r, dtype=float) ** 2
    b2 = beta * beta
    with np.errstate(divide="ignore"):
        mid = beta * np.sqrt(mu * (mu + 1)) / np.sqrt(r2) - mu
    w = np.where(r2 >= b2 * (mu + 1) / mu, 0.0, np.where(r2 <= b2 * mu / (mu + 1), 1.0, mid))
    return np.clip(w, 0.0, 1.0)


def initial_mu(r, beta):
    rmax2 = float(np.max(np.asarray(r) ** 2))
    denom = 2 * rmax2 - beta * beta
    mu = beta * beta / denom if denom > 0 else 1e6
    return float(np.clip(mu, 1e-6, 1e6))


def _finish(solver, est, w, cfg, info):
    r = solver.residuals(est)
    final = (r <= cfg.beta).astype(float)
    if final.sum() < solver.min_inliers:
        raise RobustFailure(f"only {int(final.sum())} inliers after convergence")
    if np.any(final != w):
        est = solver(final)
        r = solver.residuals(est)
    est.weights = final
    est.info = dict(est.info, **info, inliers=np.flatnonzero(final))
    return est


def gnc_tls(solver, cfg):
    """Graduated non-convexity for the truncated least squares loss."""
    w = np.ones(len(solver.meas.weights))
    est = solver(w)
    r = solver.residuals(est)
    if np.all(r <= cfg.beta):
        est.info = dict(est.info, gnc_iterations=0, inliers=np.arange(r.size))
        return est
    finite = r[np.isfinite(r)]
    if finite.size == 0:
        raise RobustFailure("no measurement has a finite residual")
    mu = initial_mu(finite, cfg.beta)
    trace = []
    prev = None
    it = 0
    for it in range(1, cfg.max_iters + 1):
        w = tls_weights(r, cfg.beta, mu)
        if np.count_nonzero(w) < solver.min_inliers:
            raise RobustFailure("every measurement was rejected")
        # at fixed weights a solve must not raise the inner cost; the 2D
        # refinement starts from the relaxation, not from est, so keep est
        # when the new estimate is worse
        before = solver.inner_cost(est, w)
        cand = solver(w)
        cost = solver.inner_cost(cand, w)
        if cost <= before:
            est = cand
        else:
            cost = before
        r = solver.residuals(est)
        trace.append((mu, before, cost))
        binary = np.all(np.minimum(w, 1 - w) <= 1e-9)
        if binary or (prev is not None and abs(cost - prev) <= cfg.conv_tol * max(prev, 1e-12)):
            break
        prev = cost
        mu *= cfg.mu_update
    return _finish(solver, est, w, cfg, {"gnc_iterations": it, "mu": mu, "cost_trace": trace})


# ------------------------------------------------------------------- IRLS

def gm_weights(r, beta):
    b2 = beta * beta
    return (b2 / (b2 + np.asarray(r, dtype=float) ** 2)) ** 2


def irls(solver, loss, cfg, max_iters=1000):
    """Fixed-point reweighting with Geman-McClure ("GM") or TLS weights."""
    if loss not in ("GM", "TLS"):
        raise InvalidInput("loss must be 'GM' or 'TLS'")
    w = np.ones(len(solver.meas.weights))
    est = solver(w)
    it = 0
    for it in range(1, max_iters + 1):
        r = solver.residuals(est)
        w_new = gm_weights(r, cfg.beta) if loss == "GM" else (r <= cfg.beta).astype(float)
        if np.count_nonzero(w_new) < solver.min_inliers:
            raise RobustFailure("reweighting rejected every measurement")
        if np.max(np.abs(w_new - w)) <= 1e-9:
            break
        w = w_new
        est = solver(w)
    r = solver.residuals(est)
    if np.count_nonzero(r <= cfg.beta) < solver.min_inliers:
        raise RobustFailure("too few inliers after reweighting")
    est.info = dict(est.info, irls_iterations=it, inliers=np.flatnonzero(r <= cfg.beta))
    return est


# ----------------------------------------------------------------- RANSAC

def ransac(minimal_solver, full_solver, N, cfg, min_set, max_iters=5000, confidence=0.99):
    """Seeded RANSAC.

    minimal_solver(idx) returns an EstimationResult for the sampled subset;
    full_solver is a WeightedSolver used both to score hypotheses (through its
    residuals) and to refit on the consensus set.
    """
    if N < min_set:
        raise InvalidInput("fewer measurements than the minimal set")
    rng = np.random.default_rng(cfg.seed)
    best_mask, best_count = None, -1
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(N, size=min_set, replace=False)
        try:
            hyp = minimal_solver(idx)
        except (PaceError, np.linalg.LinAlgError):
            continue
        r = full_solver.residuals(hyp)
        mask = r <= cfg.beta
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
            frac = count / N
            if frac >= 1:
                needed = it
            elif frac > 0:
                needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - frac**min_set)))
    if best_mask is None or best_count < max(min_set, full_solver.min_inliers):
        raise RobustFailure("no hypothesis reached the minimal consensus")
    # refit on the consensus set until it stops growing
    est = full_solver(best_mask.astype(float))
    for _ in range(10):
        mask = full_solver.residuals(est) <= cfg.beta
        if mask.sum() <= best_count:
            break
        best_mask, best_count = mask, int(mask.sum())
        est = full_solver(best_mask.astype(float))
    est.weights = best_mask.astype(float)
    est.info = dict(est.info, ransac_iterations=it, inliers=np.flatnonzero(best_mask))
    return est


def minimal_solver_3d(lib, meas, lam=None):
    """PACE3D* on a sampled subset, regularized as the full problem is."""
    lam = default_lambda(lib.K, lib.N) if lam is None else lam

    def solve(idx):
        return pace3d_star(lib.subset(idx), meas.subset(idx), lam)

    return solve


def mean_shape_pnp(lib, meas, lam=DEFAULT_LAMBDA):
    """Least-squares PnP for the library's mean shape.

    With a single shape the point-to-line cost is a quadratic form in vec(R)
    and its Shor relaxation is the same 10 x 10 SDP used for 3D rotations.
    The rounded pose is refined on the reprojection error.
    """
    mean = ShapeLibrary(lib.mean_shape()[None])
    bd = build_bearing_data(meas)
    s = mean.keypoints[0]
    E = np.einsum("na,ij->niaj", s, np.eye(3)).reshape(-1, 3, 9)  # R s_i = E_i vec(R)
    U = E - np.einsum("nij,njb->ib", bd.Wtilde, E)[None]
    Q = np.zeros((10, 10))
    Q[1:, 1:] = np.einsum("nia,nij,njb->ab", U, bd.Wi, U)
    qcqp = RotationQcqp((Q + Q.T) / 2)
    sol = solve_sdp(rotation_sdp(qcqp), tol=1e-9)
    _evals, evecs = np.linalg.eigh(sol.primal[0])
    u = evecs[:, -1] / evecs[0, -1]
    R = project_to_so3(u[1:].reshape(3, 3, order="F"))
    c1 = np.ones(1)
    t = closed_form_translation_2d(R, c1, bd, mean)
    cost = point_to_line_cost(mean, bd, R.m, t, c1, 0.0)
    est = EstimationResult(Pose(R, t), ShapeCoeffs(c1), float("nan"), cost, meas.weights.copy(), Status.ROUNDED)
    est = refine_reprojection(est, mean, meas, 0.0)
    # report coefficients of the full library: the uniform mixture is the mean
    coeffs = ShapeCoeffs(np.full(lib.K, 1.0 / lib.K), simplex=True)
    return EstimationResult(est.pose, coeffs, est.gap, est.cost, est.weights, est.status, est.info)


def minimal_solver_2d(lib, meas):
    def solve(idx):
        return mean_shape_pnp(lib.subset(idx), meas.subset(idx))

    return solve


# -------------------------------------------------------------- baseline

def wahba(targets, sources):
    """Rotation maximizing sum_i t_i . (R s_i), rows are points."""
    return project_to_so3(targets.T @ sources).m


def altern(lib, meas, lam=None, max_iters=1000, tol=1e-12):
    """Block-coordinate descent on (c, R) from R = I, c = 0."""
    if lam is None:
        lam = default_lambda(lib.K, lib.N)
    cd = center_data(lib, meas)
    op = shape_operator(cd, lam)
    Y = cd.ybar.reshape(-1, 3)
    R = np.eye(3)
    c = np.zeros(lib.K)
    history = []
    prev = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        c = shape_closed_form(cd, lam, R, op).c
        src = (cd.Bbar @ c).reshape(-1, 3)
        try:
            R = wahba(Y, src)
        except PaceError:
            break
        resid = rotate_back(cd, R) - cd.Bbar @ c
        cost = float(resid @ resid + lam * c @ c)
        history.append(cost)
        if prev - cost <= tol * max(1.0, abs(cost)):
            break
        prev = cost
    c = shape_closed_form(cd, lam, R, op).c
    t = optimal_translation(cd, R, c)
    cost = registration_cost(lib, meas, R, t, c, lam)
    return EstimationResult(
        Pose(Rotation(R), t),
        ShapeCoeffs(c),
        float("nan"),
        cost,
        meas.weights.copy(),
        Status.ROUNDED,
        {"iterations": it, "cost_history": history},
    )


# --------------------------------------------------------------- pipeline

def pace_sharp(problem, lib, meas, cfg, lam=None, prior=None):
    """ROBIN pruning followed by the configured robust scheme.

    prior holds precomputed PairBounds (3D, computed when None) or a sequence
    of WindingDictionary objects (2D, required).
    """
    problem = Problem(problem)
    if problem is Problem.THREE_D:
        bounds = prior if prior is not None else compute_pair_bounds(lib)
        pruned = robin(meas, Pair3D(bounds, cfg.beta))
        keep = pruned.inliers
        if keep.size < MIN_INLIERS_3D:
            raise RobustFailure("ROBIN kept fewer than 3 measurements")
        sub_lib, sub_meas = lib.subset(keep), meas.subset(keep)
        solver = Solver3D(sub_lib, sub_meas, lam if lam is not None else default_lambda(lib.K, lib.N))
        minimal, min_set = minimal_solver_3d(sub_lib, sub_meas, solver.lam), 5
    else:
        if prior is None:
            raise InvalidInput("2D pipeline needs winding dictionaries")
        pruned = robin(meas, Triplet2D(tuple(prior)))
        keep = pruned.inliers
        if keep.size < MIN_INLIERS_2D:
            raise RobustFailure("ROBIN kept fewer than 4 measurements")
        sub_lib, sub_meas = lib.subset(keep), meas.subset(keep)
        solver = Solver2D(sub_lib, sub_meas, DEFAULT_LAMBDA if lam is None else lam)
        minimal, min_set = minimal_solver_2d(sub_lib, sub_meas), 4
    est = robust_solve(solver, cfg, minimal, min(min_set, keep.size))
    weights = np.zeros(meas.N)
    weights[keep] = est.weights
    est.weights = weights
    est.info = dict(
        est.info,
        robin_inliers=keep,
        inliers=keep[np.asarray(est.info.get("inliers", np.arange(keep.size)), dtype=int)],
    )
    return est


def robust_solve(solver, cfg, minimal=None, min_set=None):
    """Dispatch on cfg.scheme."""
    if cfg.scheme is Scheme.GNC_TLS:
        return gnc_tls(solver, cfg)
    if cfg.scheme is Scheme.IRLS_GM:
        return irls(solver, "GM", cfg)
    if cfg.scheme is Scheme.IRLS_TLS:
        return irls(solver, "TLS", cfg)
    if minimal is None:
        raise InvalidInput("RANSAC needs a minimal solver")
    return ransac(minimal, solver, len(solver.meas.weights), cfg, min_set)

