"""Certifiable 2D-3D pose and shape estimation.

The point-to-line cost is minimized in closed form over translation, which
leaves a degree-4 polynomial problem in x = [vec(R); c]. That problem is
relaxed with an order-2 moment relaxation and the solution is rounded back to
SO(3) x simplex. A Levenberg-Marquardt pass on the reprojection cost is
provided for local refinement.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import (
    CERT_TOL,
    EstimationResult,
    InvalidInput,
    PaceError,
    Pose,
    Rotation,
    ShapeCoeffs,
    Status,
    bearing,
    expm_so3,
    hat,
    project_to_simplex,
    project_to_so3,
)
from .optkernels import SdpProblem, solve_sdp
from .pace3d import RoundingFailure, relative_gap

DEFAULT_LAMBDA = 0.01
MAX_K = 8


class DegenerateBearings(PaceError):
    pass


# ---------------------------------------------------------------- bearings

@dataclass(frozen=True)
class BearingData:
    bearings: np.ndarray  # (N, 3)
    Wi: np.ndarray  # (N, 3, 3), weights folded in
    W: np.ndarray  # (3, 3)
    Wtilde: np.ndarray  # (N, 3, 3)


def build_bearing_data(meas):
    v = bearing(meas.pixels)
    Wi = meas.weights[:, None, None] * (np.eye(3) - v[:, :, None] * v[:, None, :])
    W = Wi.sum(axis=0)
    if np.linalg.cond(W) > 1e12:
        raise DegenerateBearings("bearing directions do not determine the translation")
    Wt = np.linalg.solve(W[None], Wi)
    return BearingData(v, Wi, W, Wt)


def closed_form_translation_2d(R, c, bd, lib):
    Rm = R.m if isinstance(R, Rotation) else np.asarray(R)
    s = lib.shape(c) @ Rm.T
    return -np.einsum("nij,nj->i", bd.Wtilde, s)


def point_to_line_cost(lib, bd, R, t, c, lam):
    p = lib.shape(c) @ np.asarray(R).T + t
    return float(np.einsum("ni,nij,nj->", p, bd.Wi, p) + lam * np.dot(c, c))


def reprojection_cost(lib, meas, R, t, c, lam):
    p = lib.shape(c) @ np.asarray(R).T + t
    r = p[:, :2] / p[:, 2:3] - meas.pixels
    return float(meas.weights @ np.sum(r * r, axis=1) + lam * np.dot(c, c))


def reprojection_residuals(lib, meas, est):
    p = lib.shape(est.c) @ est.R.T + est.t
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.linalg.norm(p[:, :2] / p[:, 2:3] - meas.pixels, axis=1)
    r[~(p[:, 2] > 0)] = np.inf
    return r


# -------------------------------------------------------------- polynomials
#
# A polynomial is a dict mapping a monomial to its coefficient; a monomial is
# the sorted tuple of its variable indices, e.g. x0^2 x3 -> (0, 0, 3).

def _mono(*parts):
    return tuple(sorted(itertools.chain(*parts)))


def poly_eval(poly, x):
    x = np.asarray(x, dtype=float)
    return float(sum(c * np.prod(x[list(m)]) for m, c in poly.items()))


def poly_degree(poly):
    return max((len(m) for m, c in poly.items() if c != 0), default=0)


def so3_equalities():
    """Column orthonormality and right-handedness of R, with r = vec(R)
    column-major so column j is r[3j:3j+3]."""
    col = lambda j: [3 * j, 3 * j + 1, 3 * j + 2]
    polys = []
    for j in range(3):
        p = {(a, a): 1.0 for a in col(j)}
        p[()] = -1.0
        polys.append(p)
    for i, j in ((0, 1), (0, 2), (1, 2)):
        polys.append({_mono((a,), (b,)): 1.0 for a, b in zip(col(i), col(j))})
    for i, j, k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        ci, cj, ck = col(i), col(j), col(k)
        for row in range(3):
            u, v = (row + 1) % 3, (row + 2) % 3
            p = {}
            p[_mono((ci[u],), (cj[v],))] = p.get(_mono((ci[u],), (cj[v],)), 0.0) + 1.0
            p[_mono((ci[v],), (cj[u],))] = p.get(_mono((ci[v],), (cj[u],)), 0.0) - 1.0
            p[(ck[row],)] = -1.0
            polys.append(p)
    return polys


@dataclass(frozen=True)
class PopProblem:
    """min objective(x) s.t. equalities(x) = 0, inequalities(x) >= 0,
    over x = [vec(R); c] with d = K + 9 variables."""

    K: int
    objective: dict
    equalities: tuple
    inequalities: tuple
    quad: np.ndarray  # objective = m^T quad m + lam c^T c, m_{9k+a} = c_k r_a
    lam: float
    depth: np.ndarray = None  # (N, 9K), depth of keypoint i is depth[i] @ m

    def depths(self, R, c):
        r = np.asarray(R).reshape(-1, order="F")
        return self.depth @ np.kron(c, r)

    @property
    def dim(self):
        return self.K + 9

    def value(self, R, c):
        """Objective at a feasible point, via the quadratic form."""
        r = np.asarray(R).reshape(-1, order="F")
        m = np.kron(c, r)
        return float(m @ self.quad @ m + self.lam * np.dot(c, c))


def _shape_operators(lib, bd):
    """U[i] with R s_i(c) - sum_j Wt_j R s_j(c) = U[i] (c kron r)."""
    K, N = lib.K, lib.N
    # E(b) r = R b, so E(b) = kron(b^T, I3)
    E = np.einsum("kna,ij->kniaj", lib.keypoints, np.eye(3)).reshape(K, N, 3, 9)
    mix = np.einsum("nij,knjb->kib", bd.Wtilde, E)  # sum_j Wt_j E(b_j^k)
    U = E - mix[:, None]
    return U.transpose(1, 2, 0, 3).reshape(N, 3, 9 * K)


def build_pop(lib, bd, lam):
    K = lib.K
    U = _shape_operators(lib, bd)
    quad = np.einsum("nia,nij,njb->ab", U, bd.Wi, U)
    quad = (quad + quad.T) / 2
    obj = {}
    nb = 9 * K
    for p in range(nb):
        kp, ap = divmod(p, 9)
        for q in range(nb):
            v = quad[p, q]
            if v == 0:
                continue
            kq, aq = divmod(q, 9)
            mono = _mono((ap, aq), (9 + kp, 9 + kq))
            obj[mono] = obj.get(mono, 0.0) + v
    for k in range(K):
        obj[(9 + k, 9 + k)] = obj.get((9 + k, 9 + k), 0.0) + lam
    eqs = so3_equalities()
    eqs.append({**{(9 + k,): 1.0 for k in range(K)}, (): -1.0})
    ineqs = [{(9 + k,): 1.0} for k in range(K)]
    ineqs.append({(): 1.0, **{(9 + k, 9 + k): -1.0 for k in range(K)}})
    # with the optimal translation plugged in, the camera-frame point is U_i m
    depth = U[:, 2, :]
    return PopProblem(K, obj, tuple(eqs), tuple(ineqs), quad, lam, depth)


def depth_polynomials(pop):
    """Keypoint depths as polynomials in x; each is bilinear in (r, c)."""
    polys = []
    for row in pop.depth:
        p = {}
        for q, v in enumerate(row):
            k, a = divmod(q, 9)
            p[(a, 9 + k)] = p.get((a, 9 + k), 0.0) + v
        polys.append(p)
    return polys


# ------------------------------------------------------- moment relaxation

def monomials(d, max_degree):
    """Graded lexicographic list of monomials of degree <= max_degree."""
    out = []
    for deg in range(max_degree + 1):
        out.extend(itertools.combinations_with_replacement(range(d), deg))
    return out


@dataclass(frozen=True)
class _Structure:
    """Data-independent part of the relaxation for a given K."""

    K: int
    basis: list
    moments: list
    index: dict
    y0: np.ndarray  # particular moment vector
    null: np.ndarray  # moments = y0 + null @ z
    cells: list  # per block: (n, n, n_moments) linear map moments -> block
    reducers: list  # per block: orthonormal V with block = V (V^T F V) V^T
    C: list
    A: list


def _block_maps(K, basis, index, n_mom):
    d = K + 9
    b1 = basis[: d + 1]
    n0 = len(basis)
    maps = []
    Mm = np.zeros((n0, n0, n_mom))
    for a, ma in enumerate(basis):
        for b in range(a, n0):
            j = index[_mono(ma, basis[b])]
            Mm[a, b, j] = Mm[b, a, j] = 1.0
    maps.append(Mm)
    n1 = len(b1)
    for k in range(K):
        L = np.zeros((n1, n1, n_mom))
        for a, ma in enumerate(b1):
            for b in range(a, n1):
                j = index[_mono(ma, b1[b], (9 + k,))]
                L[a, b, j] = L[b, a, j] = 1.0
        maps.append(L)
    L = np.zeros((n1, n1, n_mom))
    for a, ma in enumerate(b1):
        for b in range(a, n1):
            base = _mono(ma, b1[b])
            L[a, b, index[base]] += 1.0
            for k in range(K):
                L[a, b, index[_mono(base, (9 + k, 9 + k))]] -= 1.0
            L[b, a] = L[a, b]
    maps.append(L)
    return maps


def _reduced_block(Mb, y0, null):
    """Facially reduced data (V, C, A) of the block y -> Mb @ y.

    Directions in the kernel of the block for every consistent y are dropped,
    which restores strict feasibility of the SDP.
    """
    F0 = Mb @ y0
    Fz = np.einsum("abm,mj->jab", Mb, null)
    gram = F0 @ F0 + np.einsum("jab,jbc->ac", Fz, Fz)
    w, V = np.linalg.eigh(gram)
    V = V[:, w > 1e-10 * w.max()]
    return V, V.T @ F0 @ V, -np.einsum("ai,jab,bk->jik", V, Fz, V, optimize=True)


@lru_cache(maxsize=16)
def _linear_localizer_index(K):
    """Moment index of b_a * b_b * r_i * c_k over the degree-1 basis b."""
    d = K + 9
    s = _structure(K)
    b1 = s.basis[: d + 1]
    idx = np.empty((d + 1, d + 1, 9 * K), dtype=int)
    for a, ma in enumerate(b1):
        for b, mb in enumerate(b1):
            for q in range(9 * K):
                k, i = divmod(q, 9)
                idx[a, b, q] = s.index[_mono(ma, mb, (i, 9 + k))]
    return idx


@lru_cache(maxsize=16)
def _structure(K):
    d = K + 9
    basis = monomials(d, 2)
    moments = monomials(d, 4)
    index = {m: i for i, m in enumerate(moments)}
    n_mom = len(moments)

    eqs = so3_equalities()
    eqs.append({**{(9 + k,): 1.0 for k in range(K)}, (): -1.0})
    rows = []
    for h in eqs:
        for m in monomials(d, 4 - poly_degree(h)):
            row = np.zeros(n_mom)
            for mono, c in h.items():
                row[index[_mono(mono, m)]] += c
            rows.append(row)
    E = np.array(rows)
    e = np.zeros(len(rows))
    unit = np.zeros(n_mom)
    unit[0] = 1.0
    E = np.vstack([E, unit])
    e = np.append(e, 1.0)

    # rank-revealing orthogonal factorization of E: its null space gives the
    # free moment coordinates, redundant rows simply drop out
    _, s, vt = np.linalg.svd(E, full_matrices=True)
    rank = int(np.sum(s > 1e-10 * s[0]))
    null = vt[rank:].T
    y0 = np.linalg.lstsq(E, e, rcond=None)[0]

    maps = _block_maps(K, basis, index, n_mom)
    cells, reducers, C, A = [], [], [], []
    for Mb in maps:
        V, Cb, Ab = _reduced_block(Mb, y0, null)
        cells.append(Mb)
        reducers.append(V)
        C.append(Cb)
        A.append(Ab)
    return _Structure(K, basis, moments, index, y0, null, cells, reducers, C, A)


@dataclass
class MomentRelaxation:
    """Order-2 moment relaxation of a PopProblem.

    Moments y satisfy the localized equality constraints and are written
    y = y0 + null z. The SDP is posed so that its dual variable is z and its
    dual slack blocks are the (facially reduced) moment and localizing
    matrices; its primal is the matching sum-of-squares certificate.
    """

    pop: PopProblem
    basis: list
    sdp: SdpProblem
    objective: np.ndarray  # coefficients over moments
    scale: float
    structure: _Structure

    @property
    def n0(self):
        return len(self.basis)

    @property
    def block_count(self):
        return len(self.sdp.C)

    def moments_from_dual(self, z):
        s = self.structure
        return s.y0 + s.null @ z

    def moment_matrix(self, y):
        return self.structure.cells[0] @ y

    def localizing_matrices(self, y):
        return [Mb @ y for Mb in self.structure.cells[1:]]

    def lift(self, x):
        """Moment vector of the point x."""
        x = np.asarray(x, dtype=float)
        return np.array([np.prod(x[list(m)]) for m in self.structure.moments])

    def dual_from_moments(self, y):
        s = self.structure
        return s.null.T @ (y - s.y0)

    def constraint_residual(self, y):
        """Distance of y from the affine set of consistent moments."""
        s = self.structure
        return float(np.linalg.norm(y - s.y0 - s.null @ (s.null.T @ (y - s.y0))))

    def value(self, y):
        return float(self.objective @ y)


def build_moment_relaxation(pop, cheirality=False):
    """Moment relaxation of pop; with cheirality, every keypoint depth gets a
    localizing block so the object is kept in front of the camera."""
    s = _structure(pop.K)
    p = np.zeros(len(s.moments))
    for mono, c in pop.objective.items():
        p[s.index[mono]] += c
    b = -(s.null.T @ p)
    scale = max(np.linalg.norm(b), 1e-12)
    C, A = list(s.C), list(s.A)
    if cheirality:
        idx = _linear_localizer_index(pop.K)
        n1 = idx.shape[0]
        a, bb = np.indices((n1, n1))
        for row in pop.depth:
            Mb = np.zeros((n1, n1, len(s.moments)))
            for q in np.flatnonzero(row):
                np.add.at(Mb, (a, bb, idx[:, :, q]), row[q])
            _, Cb, Ab = _reduced_block(Mb, s.y0, s.null)
            C.append(Cb)
            A.append(Ab)
    sdp = SdpProblem(C, A, b / scale)
    return MomentRelaxation(pop, s.basis, sdp, p, scale, s)


def solve_relaxation(rel, tol=1e-8):
    """Returns (moment vector, lower bound f, SdpSolution)."""
    sol = solve_sdp(rel.sdp, tol=tol)
    y = rel.moments_from_dual(sol.dual)
    s = rel.structure
    # sum-of-squares side value, the certified lower bound
    f = float(rel.objective @ s.y0 - rel.scale * sol.objective)
    return y, f, sol


def round_moments(rel, y):
    M = rel.moment_matrix(y)
    _w, V = np.linalg.eigh(M)
    u = V[:, -1]
    if abs(u[0]) < 1e-9:
        raise RoundingFailure("leading eigenvector has no constant component")
    u = u / u[0]
    K = rel.pop.K
    R = project_to_so3(u[1:10].reshape(3, 3, order="F"))
    c = project_to_simplex(u[10 : 10 + K])
    return R, c


def _value_derivatives(pop, R, c):
    """Value, gradient and Hessian of the objective in the ambient (r, c)."""
    K = pop.K
    r = R.reshape(-1, order="F")
    m = np.kron(c, r)
    Q = pop.quad
    gm = 2 * Q @ m
    f = m @ Q @ m + pop.lam * c @ c
    Qb = Q.reshape(K, 9, K, 9)
    gmb = gm.reshape(K, 9)
    g_r = c @ gmb
    g_c = gmb @ r + 2 * pop.lam * c
    H_rr = 2 * np.einsum("k,kalb,l->ab", c, Qb, c)
    H_rc = 2 * np.einsum("k,kalb,b->al", c, Qb, r) + gmb.T
    H_cc = 2 * np.einsum("a,kalb,b->kl", r, Qb, r) + 2 * pop.lam * np.eye(K)
    return f, g_r, g_c, H_rr, H_rc, H_cc


def polish_pop(pop, R, c, iters=30, active_tol=1e-7, keep_depth=False):
    """Monotone Newton refinement of a feasible (R, c) for the polynomial cost.

    Rotation moves as R exp(hat(d)); c moves on the face of the simplex given
    by its support, with steps truncated at the face boundary. Rounding leaves
    errors of the order of the square root of the solver tolerance; a few
    steps here recover the local minimizer to machine precision.
    """
    R = np.asarray(R, dtype=float)
    c = np.where(np.asarray(c) > active_tol, c, 0.0)
    c = c / c.sum()
    f = pop.value(R, c)
    gens = [hat(e) for e in np.eye(3)]
    for _ in range(iters):
        free = np.flatnonzero(c > 0)
        Nf = np.zeros((pop.K, max(free.size - 1, 0)))
        Nf[free] = _affine_basis(free.size)
        _, g_r, g_c, H_rr, H_rc, H_cc = _value_derivatives(pop, R, c)
        J = np.column_stack([(R @ h).reshape(-1, order="F") for h in gens])
        H_dd = J.T @ H_rr @ J
        for i in range(3):
            for j in range(3):
                S = R @ (gens[i] @ gens[j] + gens[j] @ gens[i]) / 2
                H_dd[i, j] += g_r @ S.reshape(-1, order="F")
        H = np.block([[H_dd, J.T @ H_rc @ Nf], [Nf.T @ H_rc.T @ J, Nf.T @ H_cc @ Nf]])
        g = np.concatenate([J.T @ g_r, Nf.T @ g_c])
        w, V = np.linalg.eigh((H + H.T) / 2)
        if w.min() <= 1e-12 * max(abs(w).max(), 1e-300):
            break
        step = -V @ ((V.T @ g) / w)
        dc = Nf @ step[3:]
        neg = dc < 0
        alpha = min(1.0, float(np.min(-c[neg] / dc[neg]))) if neg.any() else 1.0
        accepted = False
        for _ in range(20):
            Rn = project_to_so3(R @ expm_so3(alpha * step[:3])).m
            cn = np.maximum(c + alpha * dc, 0.0)
            cn /= cn.sum()
            fn = pop.value(Rn, cn)
            if fn < f and not (keep_depth and pop.depths(Rn, cn).min() < 0):
                accepted = True
                break
            alpha /= 2
        if not accepted:
            break
        rel_change = (f - fn) / max(abs(f), 1e-300)
        R, c, f = Rn, cn, fn
        if rel_change < 1e-15:
            break
    return Rotation(R), ShapeCoeffs(c, simplex=True)


def _solve_pop(pop, tol, cheirality):
    rel = build_moment_relaxation(pop, cheirality)
    y, f_star, sol = solve_relaxation(rel, tol)
    R, coeffs = round_moments(rel, y)
    # polishing is skipped when rounding already crossed the depth boundary
    if not (cheirality and pop.depths(R.m, coeffs.c).min() < 0):
        R, coeffs = polish_pop(pop, R.m, coeffs.c, keep_depth=cheirality)
    info = {"sdp_status": sol.status, "sdp_iterations": sol.iterations, "lower_bound": f_star, "cheirality": cheirality}
    return R, coeffs, f_star, info


def pace2d_star(lib, meas, lam=DEFAULT_LAMBDA, tol=1e-9, max_K=MAX_K, cheirality="auto"):
    """Outlier-free certifiable 2D-3D solver.

    cheirality: False solves the plain point-to-line problem, True adds
    depth >= 0 for every keypoint, "auto" adds it only when the plain
    solution puts some keypoint behind the camera.
    """
    if lib.K > max_K:
        raise InvalidInput(f"library size {lib.K} exceeds the cap {max_K}")
    if lib.N != meas.N:
        raise InvalidInput("library and measurements disagree on N")
    if cheirality not in (True, False, "auto"):
        raise InvalidInput("cheirality must be True, False or 'auto'")
    bd = build_bearing_data(meas)
    pop = build_pop(lib, bd, lam)
    R, coeffs, f_star, info = _solve_pop(pop, tol, cheirality is True)
    if cheirality == "auto" and pop.depths(R.m, coeffs.c).min() < 0:
        R, coeffs, f_star, info = _solve_pop(pop, tol, True)
    p_hat = pop.value(R.m, coeffs.c)
    gap = relative_gap(p_hat, f_star)
    t = closed_form_translation_2d(R, coeffs.c, bd, lib)
    status = Status.CERTIFIED if gap <= CERT_TOL else Status.ROUNDED
    return EstimationResult(Pose(R, t), coeffs, gap, p_hat, meas.weights.copy(), status, info)


# ------------------------------------------------------- local refinement

def _affine_basis(K):
    """Orthonormal basis of {u : sum(u) = 0}."""
    if K == 1:
        return np.zeros((1, 0))
    q, _ = np.linalg.qr(np.eye(K) - 1.0 / K)
    return q[:, : K - 1]


def refine_reprojection(init, lib, meas, lam=DEFAULT_LAMBDA, weights=None, max_iters=100, rtol=1e-10):
    """Levenberg-Marquardt on the weighted reprojection cost.

    Rotation is updated multiplicatively, c moves within sum(c) = 1. Only
    cost-decreasing steps are accepted, so the cost never increases.
    """
    w = meas.weights if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(w)
    keypoints = lib.keypoints  # (K, N, 3)
    K, N = lib.K, lib.N
    Nc = _affine_basis(K)
    sl = np.sqrt(lam)

    def residual(R, t, c):
        p = lib.shape(c) @ R.T + t
        if np.any(p[:, 2] <= 1e-12):
            return None, p
        r = (p[:, :2] / p[:, 2:3] - meas.pixels) * sw[:, None]
        return np.concatenate([r.reshape(-1), sl * c]), p

    def jacobian(R, c, p):
        s = lib.shape(c)
        inv = 1 / p[:, 2]
        dpi = np.zeros((N, 2, 3))
        dpi[:, 0, 0] = inv
        dpi[:, 1, 1] = inv
        dpi[:, 0, 2] = -p[:, 0] * inv**2
        dpi[:, 1, 2] = -p[:, 1] * inv**2
        dpi *= sw[:, None, None]
        d_rot = -np.einsum("ij,njk->nik", R, np.array([hat(v) for v in s]))
        d_c = np.einsum("ij,knj,kl->nil", R, keypoints, Nc)
        dp = np.concatenate([d_rot, np.broadcast_to(np.eye(3), (N, 3, 3)), d_c], axis=2)
        J = np.einsum("nab,nbk->nak", dpi, dp).reshape(2 * N, -1)
        reg = np.hstack([np.zeros((K, 6)), sl * Nc])
        return np.vstack([J, reg])

    R, t, c = init.R.copy(), init.t.copy(), init.c.copy()
    r, p = residual(R, t, c)
    if r is None:
        return init
    cost = float(r @ r)
    history = [cost]
    damping = 1e-3
    for _ in range(max_iters):
        J = jacobian(R, c, p)
        g = J.T @ r
        H = J.T @ J
        improved = False
        for _ in range(30):
            A = H + damping * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                damping *= 10
                continue
            Rn = R @ expm_so3(step[:3])
            tn = t + step[3:6]
            cn = c + Nc @ step[6:]
            rn, pn = residual(Rn, tn, cn)
            if rn is not None and rn @ rn < cost:
                improved = True
                break
            damping *= 10
        if not improved:
            break
        new_cost = float(rn @ rn)
        R, t, c, r, p = project_to_so3(Rn).m, tn, cn, rn, pn
        rel_change = (cost - new_cost) / max(cost, 1e-300)
        cost = new_cost
        history.append(cost)
        damping = max(damping / 10, 1e-12)
        if rel_change < rtol:
            break
    info = dict(init.info, refine_history=history)
    return EstimationResult(
        Pose(Rotation(R), t),
        ShapeCoeffs(c / c.sum()),
        init.gap,
        cost,
        w.copy(),
        init.status,
        info,
    )
