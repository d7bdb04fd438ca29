import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import random_sdp

from pacekit.optkernels import (
    InvalidProblem,
    LpFeasibility,
    NumericalFailure,
    SdpProblem,
    kkt_residuals,
    lp_feasible,
    min_norm_point,
    solve_sdp,
    solve_simplex_qp,
)


def simplex_qp_by_enumeration(H):
    """Exact minimum over the simplex: try every support, solve its KKT system."""
    K = H.shape[0]
    best = (np.inf, None)
    for size in range(1, K + 1):
        for S in itertools.combinations(range(K), size):
            S = list(S)
            A = np.zeros((size + 1, size + 1))
            A[:size, :size] = 2 * H[np.ix_(S, S)]
            A[:size, size] = 1
            A[size, :size] = 1
            rhs = np.zeros(size + 1)
            rhs[size] = 1
            sol = np.linalg.lstsq(A, rhs, rcond=None)[0][:size]
            if sol.min() < -1e-12 or abs(sol.sum() - 1) > 1e-9:
                continue
            c = np.zeros(K)
            c[S] = sol
            v = c @ H @ c
            if v < best[0]:
                best = (v, c)
    return best


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31))
def test_simplex_qp_matches_enumeration(K, rank, seed):
    rng = np.random.default_rng(seed)
    P = rng.standard_normal((rank, K)) + rng.standard_normal(rank)[:, None]
    H = P.T @ P
    c, value = solve_simplex_qp(H)
    ref, _ = simplex_qp_by_enumeration(H)
    assert c.min() >= 0 and abs(c.sum() - 1) < 1e-12
    assert value <= ref + 1e-9 * (1 + abs(ref))
    assert value >= ref - 1e-9 * (1 + abs(ref))


def test_simplex_qp_rejects_indefinite():
    with pytest.raises(InvalidProblem):
        solve_simplex_qp(np.diag([1.0, -1.0]))
    with pytest.raises(InvalidProblem):
        solve_simplex_qp(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_min_norm_point_origin_inside_hull():
    P = np.array([[1.0, -1.0, 0.0], [0.0, 0.0, 1.0]])
    P = np.hstack([P, [[0.0], [-1.0]]])
    c = min_norm_point(P)
    assert np.linalg.norm(P @ c) < 1e-9


def test_lp_feasible_simple_cases():
    # o_x >= 1 and o_x <= -1 cannot both hold
    rows = ((np.array([1.0, 0, 0]), -1.0), (np.array([-1.0, 0, 0]), -1.0))
    assert not lp_feasible(LpFeasibility(rows, 1e-3))[0]
    rows = ((np.array([1.0, 0, 0]), -1.0), (np.array([0.0, 1, 0]), 0.0))
    ok, o = lp_feasible(LpFeasibility(rows, 1e-3))
    assert ok and o[0] >= 1 + 5e-4 and o[1] >= 5e-4


def _cvxpy_value(p):
    cp = pytest.importorskip("cvxpy")
    Xs = [cp.Variable((n, n), PSD=True) for n in p.block_sizes]
    cons = [
        sum(cp.trace(Ab[j] @ X) for Ab, X in zip(p.A, Xs)) == p.b[j] for j in range(p.m)
    ]
    prob = cp.Problem(cp.Minimize(sum(cp.trace(Cb @ X) for Cb, X in zip(p.C, Xs))), cons)
    prob.solve(solver="CLARABEL", tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return prob.value


@pytest.mark.parametrize("seed", range(6))
def test_sdp_matches_independent_solver(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(n) for n in rng.integers(2, 6, size=rng.integers(1, 4))]
    p = random_sdp(rng, sizes, m=int(rng.integers(1, 8)))
    sol = solve_sdp(p, tol=1e-9)
    assert sol.status == "optimal"
    ref = _cvxpy_value(p)
    assert abs(sol.objective - ref) <= 1e-6 * (1 + abs(ref))


@given(st.integers(0, 2**31), st.sampled_from([1e-8, 1e-4]), st.integers(1, 100))
def test_sdp_weak_duality_on_every_return(seed, tol, max_iters):
    rng = np.random.default_rng(seed)
    sizes = [int(n) for n in rng.integers(1, 5, size=rng.integers(1, 3))]
    p = random_sdp(rng, sizes, m=int(rng.integers(1, 6)))
    try:
        sol = solve_sdp(p, tol=tol, max_iters=max_iters)
    except NumericalFailure:
        return
    scale = 1 + abs(sol.objective) + abs(sol.dual_objective)
    assert sol.dual_objective <= sol.objective + tol * scale
    for Xb, Zb in zip(sol.primal, sol.slack):
        assert np.linalg.eigvalsh(Xb)[0] >= 0
        assert np.linalg.eigvalsh(Zb)[0] >= 0
    # reported residuals are reproducible from the returned matrices
    np.testing.assert_allclose(kkt_residuals(p, sol.primal, sol.dual, sol.slack), sol.kkt, atol=1e-10)
    if sol.status == "optimal":
        assert max(sol.kkt) <= tol


def test_sdp_is_deterministic(rng):
    p = random_sdp(rng, [4, 3], 5)
    a, b = solve_sdp(p), solve_sdp(p)
    assert a.iterations == b.iterations
    for Xa, Xb in zip(a.primal, b.primal):
        assert np.array_equal(Xa, Xb)


def test_sdp_textbook_instances():
    sol = solve_sdp(SdpProblem([np.array([[1.0]])], [np.array([[[1.0]]])], [5.0]))
    assert abs(sol.objective - 5) < 1e-8 and abs(sol.primal[0][0, 0] - 5) < 1e-7
    E = np.array([[[0.0, 0.5], [0.5, 0.0]]])
    sol = solve_sdp(SdpProblem([np.eye(2)], [E], [1.0]))
    assert abs(sol.objective - 2) < 1e-8
    np.testing.assert_allclose(sol.primal[0], np.ones((2, 2)), atol=1e-6)


def test_sdp_rank_deficient_constraints_fail_loudly():
    A = np.array([np.eye(2), np.eye(2)])
    with pytest.raises(NumericalFailure):
        solve_sdp(SdpProblem([np.eye(2)], [A], [1.0, 1.0]))


@given(st.integers(2, 7), st.integers(0, 2**31))
def test_sdp_min_eigenvalue(n, seed):
    # min <C, X> s.t. tr X = 1 equals the smallest eigenvalue of C
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    C = (G + G.T) / 2
    sol = solve_sdp(SdpProblem([C], [np.eye(n)[None]], [1.0]), tol=1e-10)
    assert abs(sol.objective - np.linalg.eigvalsh(C)[0]) < 1e-7


def test_sdp_rejects_asymmetric():
    with pytest.raises(InvalidProblem):
        SdpProblem([np.array([[1.0, 2.0], [0.0, 1.0]])], [np.eye(2)[None]], [1.0])
