import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import (
    largest_hyperclique_by_enumeration,
    random_hypergraph,
    sampled_min_norm,
)

from pacekit import robin as rb
from pacekit.bench.synth import (
    SynthConfig2D,
    SynthConfig3D,
    gen_synthetic_2d,
    gen_synthetic_3d,
)
from pacekit.core import InvalidInput, Keypoints3D, ShapeLibrary


@st.composite
def hypergraphs(draw, n):
    N = draw(st.integers(n, 12 if n == 2 else 10))
    density = draw(st.floats(0.2, 0.95))
    seed = draw(st.integers(0, 2**31))
    return random_hypergraph(np.random.default_rng(seed), N, n, density)


@given(hypergraphs(2))
def test_max_clique_matches_networkx(g):
    nodes = rb.max_clique(g)
    assert g.is_hyperclique(nodes)
    G = nx.Graph()
    G.add_nodes_from(range(g.N))
    G.add_edges_from(g.edges)
    assert len(nodes) == max(len(c) for c in nx.find_cliques(G))


@given(hypergraphs(3))
def test_max_hyperclique_matches_enumeration(g):
    nodes = rb.max_hyperclique(g)
    assert g.is_hyperclique(nodes)
    assert len(nodes) == largest_hyperclique_by_enumeration(g)


def test_hypergraph_validation():
    with pytest.raises(InvalidInput):
        rb.CompatibilityHypergraph(4, 3, {(0, 1, 1)})
    with pytest.raises(InvalidInput):
        rb.CompatibilityHypergraph(4, 4, set())


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_bmin_against_simplex_sampling(K, seed):
    rng = np.random.default_rng(seed)
    diffs = rng.standard_normal((K, 3))
    lo, hi = rb.pair_bound(diffs)
    sampled = sampled_min_norm(diffs, rng)
    assert lo <= sampled + 1e-12
    assert sampled - lo <= 2e-3
    assert abs(hi - np.linalg.norm(diffs, axis=1).max()) < 1e-12


@given(st.integers(0, 2**31))
def test_inlier_pairs_always_pass(seed):
    lib, meas, _truth, inlier = gen_synthetic_3d(SynthConfig3D(N=12, K=4, sigma=0.01, seed=seed))
    ok = rb.pair_compatibility(meas.points, rb.compute_pair_bounds(lib), beta=0.05)
    assert ok[np.ix_(inlier, inlier)].sum() == inlier.sum() * (inlier.sum() - 1)


def test_pair_test_scalar_matches_matrix(rng):
    lib = ShapeLibrary(rng.standard_normal((3, 6, 3)))
    bounds = rb.compute_pair_bounds(lib)
    pts = rng.standard_normal((6, 3))
    ok = rb.pair_compatibility(pts, bounds, 0.1)
    for i, j in itertools.combinations(range(6), 2):
        lohi = (bounds.bmin[i, j], bounds.bmax[i, j])
        assert ok[i, j] == rb.test_pair_3d(pts[i], pts[j], lohi, 0.1)


def test_winding_order_sign_convention():
    assert rb.winding_order_2d([0, 0], [1, 0], [0, 1]) == 1
    assert rb.winding_order_2d([0, 0], [0, 1], [1, 0]) == -1
    assert rb.winding_order_2d([0, 0], [1, 1], [2, 2]) == 0


def _covisible_grid_signs(model, kp, key, grid):
    vis = grid @ model.normals.T + model.offsets > 1e-3
    faces = sorted({int(model.keypoint_face[k]) for k in key})
    o = grid[np.all(vis[:, faces], axis=1)]
    i, j, m = key
    n = np.cross(kp[j] - kp[i], kp[m] - kp[i])
    side = (o - kp[i]) @ n
    return ({-1} if np.any(side > 1e-3 * np.linalg.norm(n)) else set()) | (
        {1} if np.any(side < -1e-3 * np.linalg.norm(n)) else set()
    )


@pytest.mark.parametrize("seed", range(3))
def test_dictionary_vertex_route_matches_linprog_and_grid(seed):
    lib, models, _meas, _truth, _inlier = gen_synthetic_2d(SynthConfig2D(N=6, K=1, seed=seed))
    kp = lib.keypoints[0]
    fast = rb.build_winding_dictionary_lp(models[0], kp)
    slow = rb.build_winding_dictionary_lp(models[0], kp, method="linprog")
    assert fast.table == slow.table
    ax = np.linspace(-12, 12, 49)
    grid = np.stack(np.meshgrid(ax, ax, ax), axis=-1).reshape(-1, 3)
    for key in rb.triplets(6):
        # every sign seen from a sampled camera is allowed by the exact dictionary
        assert _covisible_grid_signs(models[0], kp, key, grid) <= fast[key]


@given(st.integers(0, 2**31), st.integers(1, 3))
def test_learned_dictionary_is_within_lp_dictionary(seed, K):
    lib, models, meas, _truth, _inlier = gen_synthetic_2d(SynthConfig2D(N=7, K=K, sigma=0.0, seed=seed))
    dicts = [rb.build_winding_dictionary_lp(m, lib.keypoints[k]) for k, m in enumerate(models)]
    annotated = [(key, rb.winding_order_2d(*meas.pixels[list(key)])) for key in rb.triplets(7)]
    learned = rb.learn_winding_dictionary(7, annotated)
    for key in rb.triplets(7):
        assert rb.test_triplet_2d(*meas.pixels[list(key)], dicts, key)
        observed = learned[key]
        allowed = set().union(*(d[key] for d in dicts))
        if len(observed) == 1:
            assert observed <= allowed


def test_dictionary_requires_every_triplet():
    with pytest.raises(InvalidInput):
        rb.WindingDictionary(4, {(0, 1, 2): {1}})


def test_robin_keeps_inliers_on_clean_data():
    lib, meas, _truth, _inlier = gen_synthetic_3d(SynthConfig3D(N=30, K=5, sigma=0.0, seed=4))
    res = rb.robin(meas, rb.Pair3D(rb.compute_pair_bounds(lib), 0.01))
    np.testing.assert_array_equal(res.inliers, np.arange(30))


def test_robin_prunes_outliers_3d():
    lib, meas, _truth, inlier = gen_synthetic_3d(
        SynthConfig3D(N=60, K=5, sigma=0.01, outlier_rate=0.7, intra_class_radius=0.1, seed=2)
    )
    res = rb.robin(meas, rb.Pair3D(rb.compute_pair_bounds(lib), 0.05))
    assert res.inliers.size >= inlier.sum()
    assert inlier[res.inliers].mean() >= 0.9


def test_robin_triplet_2d_keeps_all_clean_points():
    lib, models, meas, _truth, _inlier = gen_synthetic_2d(SynthConfig2D(N=8, K=2, sigma=0.0, seed=1))
    dicts = tuple(rb.build_winding_dictionary_lp(m, lib.keypoints[k]) for k, m in enumerate(models))
    res = rb.robin(meas, rb.Triplet2D(dicts))
    np.testing.assert_array_equal(res.inliers, np.arange(8))


def test_robin_small_input_is_degenerate():
    lib = ShapeLibrary(np.random.default_rng(0).standard_normal((2, 3, 3)))
    meas = Keypoints3D(np.zeros((3, 3)))
    res = rb.robin(meas, rb.Pair3D(rb.compute_pair_bounds(lib), 0.05))
    assert res.inliers.size <= 3
