"""Certifiable 3D-3D pose and shape estimation.

Translation and shape are eliminated in closed form, the remaining rotation
problem is a QCQP over [1; vec(R)] solved through its Shor relaxation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .core import (
    CERT_TOL,
    EstimationResult,
    PaceError,
    Pose,
    Rotation,
    ShapeCoeffs,
    Status,
    expm_so3,
    hat,
    project_to_simplex,
    project_to_so3,
)
from .optkernels import SdpProblem, solve_sdp


class DegenerateWeights(PaceError):
    pass


class IllPosedShape(PaceError):
    pass


class RoundingFailure(PaceError):
    pass


def default_lambda(K, N):
    return float(np.sqrt(K / N))


@dataclass(frozen=True)
class CenteredData3D:
    ybar: np.ndarray  # (3N,)
    Bbar: np.ndarray  # (3N, K)
    yw: np.ndarray  # (3,)
    bw: np.ndarray  # (K, 3)
    weights: np.ndarray

    @property
    def Y(self):
        """Centered measurements as a 3 x N matrix."""
        return self.ybar.reshape(-1, 3).T

    @property
    def N(self):
        return self.weights.size

    @property
    def K(self):
        return self.Bbar.shape[1]


def center_data(lib, meas):
    w = meas.weights
    if w.sum() <= 0:
        raise DegenerateWeights("all weights are zero")
    wn = w / w.sum()
    yw = wn @ meas.points
    bw = np.einsum("n,kni->ki", wn, lib.keypoints)
    sw = np.sqrt(w)
    ybar = (sw[:, None] * (meas.points - yw)).reshape(-1)
    bbar = sw[None, :, None] * (lib.keypoints - bw[:, None, :])
    Bbar = bbar.reshape(lib.K, -1).T
    return CenteredData3D(ybar, Bbar, yw, bw, w)


@dataclass(frozen=True)
class ShapeClosedForm:
    Hbar: np.ndarray
    G: np.ndarray
    g: np.ndarray


def shape_operator(cd, lam):
    K = cd.K
    Hbar = 2 * (cd.Bbar.T @ cd.Bbar + lam * np.eye(K))
    try:
        cf = sla.cho_factor(Hbar)
        if lam <= 0 and np.linalg.cond(Hbar) > 1e12:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError as exc:
        raise IllPosedShape("shape Hessian is singular") from exc
    Hinv = sla.cho_solve(cf, np.eye(K))
    h1 = Hinv.sum(axis=1)
    s = h1.sum()
    G = Hinv - np.outer(h1, h1) / s
    g = h1 / s
    return ShapeClosedForm(Hbar, (G + G.T) / 2, g)


def rotate_back(cd, R):
    """(I_N kron R^T) ybar, i.e. R^T applied to every centered measurement."""
    return (cd.ybar.reshape(-1, 3) @ R).reshape(-1)


def shape_closed_form(cd, lam, R, op=None):
    """Optimal shape for a fixed rotation under the affine constraint sum(c) = 1."""
    op = op or shape_operator(cd, lam)
    Rm = R.m if isinstance(R, Rotation) else np.asarray(R)
    c = 2 * op.G @ (cd.Bbar.T @ rotate_back(cd, Rm)) + op.g
    return ShapeCoeffs(c)


def optimal_translation(cd, R, c):
    return cd.yw - R @ (np.asarray(c) @ cd.bw)


# column-major vec: vec(R^T) = P vec(R)
_P_TRIPLETS = [(1, 1), (2, 4), (3, 7), (4, 2), (5, 5), (6, 8), (7, 3), (8, 6), (9, 9)]
TRANSPOSE_PERM = np.zeros((9, 9))
for _i, _j in _P_TRIPLETS:
    TRANSPOSE_PERM[_i - 1, _j - 1] = 1.0

# (row, col, value), one-based, upper triangle
_SO3_TRIPLETS = [
    [(1, 1, 1)],
    [(1, 1, 1), (2, 2, -1), (3, 3, -1), (4, 4, -1)],
    [(1, 1, 1), (5, 5, -1), (6, 6, -1), (7, 7, -1)],
    [(1, 1, 1), (8, 8, -1), (9, 9, -1), (10, 10, -1)],
    [(2, 5, 1), (3, 6, 1), (4, 7, 1)],
    [(2, 8, 1), (3, 9, 1), (4, 10, 1)],
    [(5, 8, 1), (6, 9, 1), (7, 10, 1)],
    [(3, 7, 1), (4, 6, -1), (1, 8, -1)],
    [(4, 5, 1), (2, 7, -1), (1, 9, -1)],
    [(2, 6, 1), (1, 10, -1), (3, 5, -1)],
    [(6, 10, 1), (1, 2, -1), (7, 9, -1)],
    [(7, 8, 1), (5, 10, -1), (1, 3, -1)],
    [(5, 9, 1), (1, 4, -1), (6, 8, -1)],
    [(4, 9, 1), (3, 10, -1), (1, 5, -1)],
    [(2, 10, 1), (1, 6, -1), (4, 8, -1)],
    [(3, 8, 1), (2, 9, -1), (1, 7, -1)],
]


def _sym_from_triplets(triplets):
    A = np.zeros((10, 10))
    for i, j, v in triplets:
        A[i - 1, j - 1] = v
        A[j - 1, i - 1] = v
    return A


SO3_CONSTRAINTS = np.array([_sym_from_triplets(t) for t in _SO3_TRIPLETS])


def lift_rotation(R):
    """The vector [1; vec(R)] with column-major vec."""
    return np.concatenate([[1.0], np.asarray(R).reshape(-1, order="F")])


@dataclass(frozen=True)
class RotationQcqp:
    Q: np.ndarray
    A: np.ndarray = SO3_CONSTRAINTS[1:]
    A0: np.ndarray = SO3_CONSTRAINTS[0]

    def cost(self, R):
        r = lift_rotation(R)
        return float(r @ self.Q @ r)


def assemble_rotation_qcqp(cd, lam, op=None):
    op = op or shape_operator(cd, lam)
    Bbar, G, g = cd.Bbar, op.G, op.g
    T = np.kron(cd.Y.T, np.eye(3)) @ TRANSPOSE_PERM  # (3N, 9): u = T vec(R)
    BtT = Bbar.T @ T
    # M = [2 B G B^T - I; 2 sqrt(lam) G B^T],  h = [B g; sqrt(lam) g]
    MT = np.vstack([2 * Bbar @ (G @ BtT) - T, 2 * np.sqrt(lam) * (G @ BtT)])
    h = np.concatenate([Bbar @ g, np.sqrt(lam) * g])
    Q = np.empty((10, 10))
    Q[0, 0] = h @ h
    Q[0, 1:] = Q[1:, 0] = h @ MT
    Q[1:, 1:] = MT.T @ MT
    return RotationQcqp((Q + Q.T) / 2)


def rotation_cost(cd, lam, R, op=None):
    """Translation-free cost at R with the optimal shape plugged in."""
    op = op or shape_operator(cd, lam)
    c = shape_closed_form(cd, lam, R, op).c
    resid = rotate_back(cd, np.asarray(R)) - cd.Bbar @ c
    return float(resid @ resid + lam * c @ c)


def rotation_sdp(qcqp):
    b = np.zeros(16)
    b[0] = 1.0
    return SdpProblem([qcqp.Q], [SO3_CONSTRAINTS], b)


def solve_rotation(qcqp, tol=1e-9):
    """Shor relaxation. Returns (X, f) with f the dual bound."""
    sol = solve_sdp(rotation_sdp(qcqp), tol=tol)
    return sol.primal[0], sol.dual_objective, sol


def relative_gap(p_hat, f_star):
    return abs(p_hat - f_star) / (1 + abs(p_hat) + abs(f_star))


def round_and_certify(X, f_star, qcqp):
    _evals, evecs = np.linalg.eigh(X)
    u = evecs[:, -1]
    if abs(u[0]) < 1e-9:
        raise RoundingFailure("leading eigenvector has no homogeneous component")
    u = u / u[0]
    R = project_to_so3(u[1:].reshape(3, 3, order="F"))
    return R, relative_gap(qcqp.cost(R.m), f_star)


def polish_rotation(qcqp, R, iters=10):
    """Gauss-Newton on SO(3) for the quadratic rotation cost, monotone.

    The rounded rotation is only accurate to about the square root of the
    solver tolerance; a few local steps recover full precision.
    """
    q = qcqp.Q[1:, 0]
    Qr = qcqp.Q[1:, 1:]
    R = np.asarray(R)
    cost = qcqp.cost(R)
    for _ in range(iters):
        J = np.column_stack([(R @ hat(e)).reshape(-1, order="F") for e in np.eye(3)])
        r = R.reshape(-1, order="F")
        H = J.T @ Qr @ J
        try:
            delta = -np.linalg.solve(H, J.T @ (q + Qr @ r))
        except np.linalg.LinAlgError:
            break
        cand = R @ expm_so3(delta)
        cand_cost = qcqp.cost(cand)
        if not cand_cost < cost:
            break
        R, cost = cand, cand_cost
    return project_to_so3(R)


def registration_cost(lib, meas, R, t, c, lam):
    """Weighted 3D-3D residual cost plus the shape regularizer."""
    s = lib.shape(c)
    r = meas.points - s @ R.T - t
    return float(meas.weights @ np.sum(r * r, axis=1) + lam * np.dot(c, c))


def residuals_3d(lib, meas, est):
    s = lib.shape(est.c)
    return np.linalg.norm(meas.points - s @ est.R.T - est.t, axis=1)


def pace3d_star(lib, meas, lam=None, simplex_output=False, tol=1e-9):
    """Outlier-free certifiable solver.

    Returns an EstimationResult whose gap is the relative suboptimality of the
    rounded rotation against the relaxation bound.
    """
    if lam is None:
        lam = default_lambda(lib.K, lib.N)
    cd = center_data(lib, meas)
    op = shape_operator(cd, lam)
    qcqp = assemble_rotation_qcqp(cd, lam, op)
    info = {}
    X, f_star, sol = solve_rotation(qcqp, tol)
    info["sdp_status"] = sol.status
    info["sdp_iterations"] = sol.iterations
    R, gap = round_and_certify(X, f_star, qcqp)
    R = polish_rotation(qcqp, R.m)
    gap = relative_gap(qcqp.cost(R.m), f_star)
    coeffs = shape_closed_form(cd, lam, R, op)
    if simplex_output:
        coeffs = project_to_simplex(coeffs.c)
    t = optimal_translation(cd, R.m, coeffs.c)
    cost = registration_cost(lib, meas, R.m, t, coeffs.c, lam)
    status = Status.CERTIFIED if gap <= CERT_TOL else Status.ROUNDED
    info["lower_bound"] = f_star
    return EstimationResult(Pose(R, t), coeffs, gap, cost, meas.weights.copy(), status, info)
