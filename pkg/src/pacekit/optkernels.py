"""Small dense convex solvers: simplex QP, LP feasibility and a multi-block SDP
interior-point method."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .core import PaceError


class InvalidProblem(PaceError):
    pass


class NumericalFailure(PaceError):
    pass


# ---------------------------------------------------------------- simplex QP

@dataclass(frozen=True)
class SimplexQp:
    H: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if H.shape[0] != H.shape[1]:
            raise InvalidProblem("H must be square")
        if np.abs(H - H.T).max() > 1e-10 * max(1.0, np.abs(H).max()):
            raise InvalidProblem("H must be symmetric")
        object.__setattr__(self, "H", (H + H.T) / 2)


def min_norm_point(P, tol=1e-12, max_iters=1000):
    """Minimum-norm point in the convex hull of the columns of P.

    Wolfe's algorithm. Returns the convex weights (length K).
    The corral never exceeds dim+1 points, so every linear solve is tiny.
    """
    P = np.asarray(P, dtype=float)
    K = P.shape[1]
    if K == 1:
        return np.ones(1)
    sq = np.einsum("ij,ij->j", P, P)
    scale = max(sq.max(), 1e-300)
    j0 = int(np.argmin(sq))
    S = [j0]
    lam = np.array([1.0])
    x = P[:, j0].copy()
    for _ in range(max_iters):
        xx = x @ x
        dots = x @ P
        j = int(np.argmin(dots))
        if xx - dots[j] <= tol * scale or j in S:
            break
        S.append(j)
        lam = np.append(lam, 0.0)
        while True:
            alpha = _affine_minimizer(P[:, S])
            if np.all(alpha > 1e-15):
                lam = alpha
                break
            neg = np.flatnonzero(alpha <= 1e-15)
            ratios = lam[neg] / (lam[neg] - alpha[neg])
            block = neg[int(np.argmin(ratios))]
            theta = min(1.0, ratios.min())
            lam = theta * alpha + (1 - theta) * lam
            keep = lam > 1e-15
            keep[block] = False
            S = [s for s, k in zip(S, keep) if k]
            lam = lam[keep]
            lam /= lam.sum()
        x = P[:, S] @ lam
    c = np.zeros(K)
    c[S] = lam
    c = np.maximum(c, 0.0)
    return c / c.sum()


def _affine_minimizer(Q):
    """Weights a with sum 1 minimizing ||Q a||."""
    k = Q.shape[1]
    if k == 1:
        return np.ones(1)
    G = Q.T @ Q
    A = np.zeros((k + 1, k + 1))
    A[:k, :k] = G
    A[:k, k] = 1.0
    A[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    a = sol[:k]
    return a / a.sum()


def solve_simplex_qp(p):
    """Minimize c^T H c over the probability simplex.

    Returns (c, value). H is factored as P^T P and the problem is solved as a
    minimum-norm-point problem in the convex hull of the columns of P.
    """
    if not isinstance(p, SimplexQp):
        p = SimplexQp(p)
    H = p.H
    K = H.shape[0]
    if K == 1:
        if H[0, 0] < -1e-10:
            raise InvalidProblem("H is not positive semidefinite")
        return np.ones(1), float(H[0, 0])
    evals, evecs = np.linalg.eigh(H)
    if evals[0] < -1e-10 * max(1.0, abs(evals[-1])):
        raise InvalidProblem("H is not positive semidefinite")
    evals = np.maximum(evals, 0.0)
    P = np.sqrt(evals)[:, None] * evecs.T
    c = min_norm_point(P)
    return c, float(c @ H @ c)


# ------------------------------------------------------------ LP feasibility

@dataclass(frozen=True)
class LpFeasibility:
    """Rows (a, b) meaning a.o + b >= margin."""

    rows: tuple
    margin: float = 1e-3

    def arrays(self):
        a = np.array([r[0] for r in self.rows], dtype=float).reshape(-1, 3)
        b = np.array([r[1] for r in self.rows], dtype=float)
        return a, b


def lp_feasible(p, box=1e3):
    """Decide whether some o in a bounded box satisfies every row with margin.

    Solves max s s.t. a.o + b >= s, s <= 1 with the HiGHS simplex; the system is
    feasible iff the optimum reaches the margin. The witness then has slack at
    least the margin on every row.
    """
    a, b = p.arrays()
    if a.shape[0] == 0:
        return True, np.zeros(3)
    # variables (o1, o2, o3, s); linprog minimizes so use -s
    A_ub = np.hstack([-a, np.ones((a.shape[0], 1))])
    res = linprog(
        c=[0.0, 0.0, 0.0, -1.0],
        A_ub=A_ub,
        b_ub=b,
        bounds=[(-box, box)] * 3 + [(None, 1.0)],
        method="highs-ds",
    )
    if res.status != 0:
        return False, None
    o = res.x[:3]
    slack = a @ o + b
    if slack.min() >= p.margin / 2 and -res.fun >= p.margin:
        return True, o
    return False, None


# ----------------------------------------------------------------- SDP

@dataclass
class SdpProblem:
    """min sum_b <C_b, X_b>  s.t.  sum_b <A_bj, X_b> = b_j,  X_b PSD.

    A[b] stacks the m constraint matrices of block b, shape (m, n_b, n_b).
    """

    C: list
    A: list
    b: np.ndarray

    def __post_init__(self):
        self.C = [np.atleast_2d(np.asarray(c, dtype=float)) for c in self.C]
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        m = self.b.size
        A = []
        for Cb, Ab in zip(self.C, self.A):
            Ab = np.asarray(Ab, dtype=float).reshape(m, Cb.shape[0], Cb.shape[0])
            A.append(Ab)
        self.A = A
        for Cb, Ab in zip(self.C, self.A):
            if np.abs(Cb - Cb.T).max() > 1e-12 * max(1, np.abs(Cb).max()):
                raise InvalidProblem("objective blocks must be symmetric")
            if m and np.abs(Ab - Ab.transpose(0, 2, 1)).max() > 1e-12 * max(1, np.abs(Ab).max()):
                raise InvalidProblem("constraint blocks must be symmetric")

    @classmethod
    def from_rows(cls, C, rows):
        """Build from rows [(mats, b_j)] where mats has one matrix (or None) per block."""
        sizes = [np.atleast_2d(c).shape[0] for c in C]
        A = [np.zeros((len(rows), n, n)) for n in sizes]
        b = np.zeros(len(rows))
        for j, (mats, bj) in enumerate(rows):
            for blk, M in enumerate(mats):
                if M is not None:
                    A[blk][j] = M
            b[j] = bj
        return cls(list(C), A, b)

    @property
    def block_sizes(self):
        return [c.shape[0] for c in self.C]

    @property
    def m(self):
        return self.b.size

    def apply(self, X):
        """A(X), the m-vector of constraint values."""
        out = np.zeros(self.m)
        for Ab, Xb in zip(self.A, X):
            out += Ab.reshape(self.m, -1) @ Xb.reshape(-1)
        return out

    def adjoint(self, y):
        """A^T(y), one matrix per block."""
        return [(y @ Ab.reshape(self.m, -1)).reshape(Ab.shape[1:]) for Ab in self.A]

    def objective(self, X):
        return float(sum(np.vdot(Cb, Xb) for Cb, Xb in zip(self.C, X)))


@dataclass
class SdpSolution:
    primal: list
    dual: np.ndarray
    slack: list
    objective: float
    dual_objective: float
    kkt: tuple
    status: str
    iterations: int
    history: list = field(default_factory=list, repr=False)


def kkt_residuals(p, X, y, Z):
    """(relative primal residual, relative dual residual, relative complementarity)."""
    rp = p.b - p.apply(X)
    aty = p.adjoint(y)
    rd2 = sum(np.sum((Cb - Ab - Zb) ** 2) for Cb, Ab, Zb in zip(p.C, aty, Z))
    cnorm = np.sqrt(sum(np.sum(Cb**2) for Cb in p.C))
    pobj = p.objective(X)
    dobj = float(p.b @ y)
    comp = sum(np.vdot(Xb, Zb) for Xb, Zb in zip(X, Z))
    denom = 1 + abs(pobj) + abs(dobj)
    return (
        float(np.linalg.norm(rp) / (1 + np.linalg.norm(p.b))),
        float(np.sqrt(rd2) / (1 + cnorm)),
        float(max(abs(comp), abs(pobj - dobj)) / denom),
    )


def _max_step_scaled(d, dt):
    """Largest alpha with diag(d) + alpha dt PSD (inf if unbounded)."""
    isd = 1 / np.sqrt(d)
    T = isd[:, None] * dt * isd[None, :]
    lam = np.linalg.eigvalsh((T + T.T) / 2)[0]
    return np.inf if lam >= 0 else -1.0 / lam


def solve_sdp(p, tol=1e-9, max_iters=100):
    """Primal-dual interior point method with Nesterov-Todd scaling.

    Infeasible start from X = tau_p I, y = 0, Z = tau_d I; Mehrotra
    predictor-corrector steps; the Schur complement is formed densely and
    factored by Cholesky.

    Returns an SdpSolution whose status is "optimal" when every relative
    residual is below tol, otherwise "max_iterations" or "stalled" with the
    best iterate seen. Only iterates obeying weak duality (b.y <= <C, X> up
    to tol relative to 1 + |<C, X>| + |b.y|) are eligible for return; if none
    exists, or a factorization breaks down before one does, NumericalFailure
    is raised.
    """
    m = p.m
    sizes = p.block_sizes
    n_total = sum(sizes)
    Amat = [Ab.reshape(m, -1) for Ab in p.A]

    a_norms = np.sqrt(sum(np.sum(Am**2, axis=1) for Am in Amat)) if m else np.zeros(0)
    c_norm = np.sqrt(sum(np.sum(Cb**2) for Cb in p.C))
    tau_p = max(10.0, np.sqrt(n_total))
    if m:
        tau_p = max(tau_p, n_total * np.max((1 + np.abs(p.b)) / (1 + a_norms)))
    tau_d = max(10.0, np.sqrt(n_total), c_norm, a_norms.max() if m else 0.0)

    X = [tau_p * np.eye(n) for n in sizes]
    Z = [tau_d * np.eye(n) for n in sizes]
    y = np.zeros(m)

    best = None
    best_score = np.inf
    history = []
    status = "max_iterations"
    stall = 0
    it = 0
    for it in range(max_iters + 1):
        res = kkt_residuals(p, X, y, Z)
        score = max(res)
        history.append(res)
        pobj, dobj = p.objective(X), float(p.b @ y)
        weak = dobj <= pobj + tol * (1 + abs(pobj) + abs(dobj))
        if weak and score < best_score:
            best_score = score
            best = ([x.copy() for x in X], y.copy(), [z.copy() for z in Z], res, it)
        if score <= tol and weak:
            status = "optimal"
            break
        if it == max_iters:
            break
        if len(history) > 6 and score > 0.9 * min(max(h) for h in history[-6:-1]):
            stall += 1
        else:
            stall = 0
        if stall >= 8:
            status = "stalled"
            break
        try:
            X, y, Z = _ipm_step(p, Amat, X, y, Z, n_total)
        except (np.linalg.LinAlgError, FloatingPointError) as exc:
            if best is None or it == 0:
                raise NumericalFailure(f"factorization failed: {exc}") from exc
            status = "stalled"
            break

    if best is None:
        raise NumericalFailure("no iterate satisfies weak duality")
    X, y, Z, res, _best_it = best
    return SdpSolution(
        primal=X,
        dual=y,
        slack=Z,
        objective=p.objective(X),
        dual_objective=float(p.b @ y),
        kkt=res,
        status=status,
        iterations=it,
        history=history,
    )


def _ipm_step(p, Amat, X, y, Z, n_total):
    m = p.m
    rp = p.b - p.apply(X)
    aty = p.adjoint(y)
    Rd = [Cb - Ab - Zb for Cb, Ab, Zb in zip(p.C, aty, Z)]
    mu = sum(np.vdot(Xb, Zb) for Xb, Zb in zip(X, Z)) / n_total

    # Nesterov-Todd scaling W = G G^T with G^T Z G = G^{-1} X G^{-T} = diag(d).
    # Directions and step lengths are computed in this scaled space, where
    # both iterates are the same diagonal matrix.
    Gs, ds = [], []
    for Xb, Zb in zip(X, Z):
        L = np.linalg.cholesky(Xb)
        R = np.linalg.cholesky(Zb)
        _U, d, Vt = np.linalg.svd(R.T @ L)
        G = L @ Vt.T / np.sqrt(d)
        Gs.append(G)
        ds.append(d)

    # The Newton system is solved in the scaled space through a Householder QR
    # of the stacked (symmetric-packed) scaled constraints G^T A_i G. Working
    # with the orthogonal factor avoids forming A (W kron W) A^T and avoids
    # recovering dX through W dZ W, both of which lose accuracy as mu -> 0.
    packs, cols = [], []
    for Ab, G in zip(p.A, Gs):
        n = G.shape[0]
        iu = np.triu_indices(n)
        w = np.where(iu[0] == iu[1], 1.0, np.sqrt(2.0))
        packs.append((iu, w))
        S = np.matmul(np.matmul(G.T, Ab), G)
        cols.append(S[:, iu[0], iu[1]] * w)
    At = np.hstack(cols).T  # (packed size, m)
    if At.shape[0] < m:
        raise np.linalg.LinAlgError("more constraints than packed variables")
    Q, Rq = np.linalg.qr(At)
    diag = np.abs(np.diag(Rq))
    if diag.min() <= 1e-14 * diag.max():
        raise np.linalg.LinAlgError("scaled constraints are rank deficient")

    GRdG = [G.T @ R @ G for G, R in zip(Gs, Rd)]
    w_rp = sla.solve_triangular(Rq, rp, trans="T")

    def pack(mats):
        return np.concatenate([M[iu[0], iu[1]] * w for M, (iu, w) in zip(mats, packs)])

    def unpack(vec):
        out, k = [], 0
        for (iu, w), n in zip(packs, p.block_sizes):
            seg = vec[k : k + w.size] / w
            k += w.size
            M = np.zeros((n, n))
            M[iu[0], iu[1]] = seg
            M[iu[1], iu[0]] = seg
            out.append(M)
        return out

    def direction(Rt):
        # Rt: scaled right-hand side, dXt + dZt = Rt; the primal direction is
        # the projection of v onto the constraint set, (I - QQ^T) v + Q w_rp
        v = pack([rt - g for rt, g in zip(Rt, GRdG)])
        qv = Q.T @ v
        dy = sla.solve_triangular(Rq, w_rp - qv)
        dXt = unpack(v - Q @ (qv - w_rp))
        dZt = [rt - t for rt, t in zip(Rt, dXt)]
        dX = [G @ t @ G.T for G, t in zip(Gs, dXt)]
        dX = [(t + t.T) / 2 for t in dX]
        dZ = [r - a for r, a in zip(Rd, p.adjoint(dy))]
        dZ = [(t + t.T) / 2 for t in dZ]
        return dX, dy, dZ, dXt, dZt

    def steps(dXt, dZt):
        ap = min(_max_step_scaled(d, t) for d, t in zip(ds, dXt))
        ad = min(_max_step_scaled(d, t) for d, t in zip(ds, dZt))
        return ap, ad

    # predictor: dXt + dZt = -D
    dX, dy, dZ, dXt, dZt = direction([-np.diag(d) for d in ds])
    ap, ad = steps(dXt, dZt)
    ap, ad = min(1.0, ap), min(1.0, ad)
    mu_aff = sum(
        np.vdot(np.diag(d) + ap * xt, np.diag(d) + ad * zt) for d, xt, zt in zip(ds, dXt, dZt)
    ) / n_total
    sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3

    # Mehrotra corrector
    Rt = []
    for d, xt, zt in zip(ds, dXt, dZt):
        prod = xt @ zt
        rhs = -(prod + prod.T) / 2
        rhs[np.diag_indices_from(rhs)] += sigma * mu - d * d
        Rt.append(2 * rhs / (d[:, None] + d[None, :]))
    dX, dy, dZ, dXt, dZt = direction(Rt)
    ap, ad = steps(dXt, dZt)
    gamma = 0.9 + 0.09 * min(1.0, ap, ad)
    ap, ad = min(1.0, gamma * ap), min(1.0, gamma * ad)

    X = [Xb + ap * dx for Xb, dx in zip(X, dX)]
    Z = [Zb + ad * dz for Zb, dz in zip(Z, dZ)]
    y = y + ad * dy
    return X, y, Z
