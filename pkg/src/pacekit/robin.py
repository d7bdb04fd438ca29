"""Invariant-based outlier pruning via maximum (hyper)cliques."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import InvalidInput, PaceError
from .optkernels import LpFeasibility, lp_feasible, min_norm_point

LP_MARGIN = 1e-3


class DictionaryEntryUndefined(PaceError, UserWarning):
    pass


# ------------------------------------------------------------ pair invariant

@dataclass(frozen=True)
class PairBounds:
    bmin: np.ndarray
    bmax: np.ndarray


def pair_bound(diffs):
    """(bmin, bmax) for one pair from its K difference vectors, shape (K, 3)."""
    bmax = float(np.sqrt(np.einsum("ki,ki->k", diffs, diffs).max()))
    c = min_norm_point(diffs.T)
    bmin = float(np.linalg.norm(c @ diffs))
    return min(bmin, bmax), bmax


def compute_pair_bounds(lib):
    N = lib.N
    bmin = np.zeros((N, N))
    bmax = np.zeros((N, N))
    for i in range(N):
        for j in range(i + 1, N):
            lo, hi = pair_bound(lib.keypoints[:, j] - lib.keypoints[:, i])
            bmin[i, j] = bmin[j, i] = lo
            bmax[i, j] = bmax[j, i] = hi
    return PairBounds(bmin, bmax)


def test_pair_3d(yi, yj, bounds, beta):
    lo, hi = bounds
    d = np.linalg.norm(np.asarray(yj) - np.asarray(yi))
    return bool(lo - 2 * beta <= d <= hi + 2 * beta)


def pair_compatibility(points, bounds, beta):
    """Boolean N x N matrix of passed pair tests (diagonal False)."""
    diff = points[:, None, :] - points[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    ok = (d >= bounds.bmin - 2 * beta) & (d <= bounds.bmax + 2 * beta)
    np.fill_diagonal(ok, False)
    return ok


# --------------------------------------------------------- winding invariant

def winding_order_2d(zi, zj, zm):
    """Sign of det[zj - zi, zm - zi]: +1, -1, or 0 when collinear."""
    a = np.asarray(zj, dtype=float) - np.asarray(zi, dtype=float)
    b = np.asarray(zm, dtype=float) - np.asarray(zi, dtype=float)
    return int(np.sign(a[0] * b[1] - a[1] * b[0]))


def triplets(N):
    return list(itertools.combinations(range(N), 3))


@dataclass
class WindingDictionary:
    """Allowed winding signs for every sorted triplet of N keypoints.

    Signs use the same convention as winding_order_2d.
    """

    N: int
    table: dict

    def __post_init__(self):
        expected = set(triplets(self.N))
        if set(self.table) != expected:
            raise InvalidInput("dictionary keys must cover every sorted triplet")
        for key, val in self.table.items():
            val = frozenset(int(s) for s in val)
            if not val <= {1, -1}:
                raise InvalidInput(f"invalid signs for triplet {key}")
            self.table[key] = val

    def __getitem__(self, key):
        return self.table[tuple(key)]

    def masks(self):
        """(allow_plus, allow_minus) boolean arrays in combinations order."""
        keys = triplets(self.N)
        plus = np.array([1 in self.table[k] for k in keys], dtype=bool)
        minus = np.array([-1 in self.table[k] for k in keys], dtype=bool)
        return plus, minus

    def issubset(self, other):
        return all(self.table[k] <= other.table[k] for k in self.table)


@dataclass(frozen=True)
class ConvexShapeModel:
    """Convex polyhedron as faces n.p + b = 0 with outward unit normals."""

    normals: np.ndarray
    offsets: np.ndarray
    keypoint_face: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        b = np.asarray(self.offsets, dtype=float).reshape(-1)
        kf = np.asarray(self.keypoint_face, dtype=int).reshape(-1)
        if n.shape[0] != b.size:
            raise InvalidInput("one offset per face normal is required")
        if np.abs(np.linalg.norm(n, axis=1) - 1).max() > 1e-9:
            raise InvalidInput("face normals must be unit vectors")
        if kf.size and (kf.min() < 0 or kf.max() >= n.shape[0]):
            raise InvalidInput("keypoint face index out of range")
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "offsets", b)
        object.__setattr__(self, "keypoint_face", kf)

    def check_keypoints(self, keypoints, tol=1e-9):
        """Raise unless every keypoint lies strictly inside its face."""
        p = np.asarray(keypoints, dtype=float)
        s = p @ self.normals.T + self.offsets
        for i, f in enumerate(self.keypoint_face):
            if abs(s[i, f]) > tol * max(1.0, np.abs(p[i]).max()):
                raise InvalidInput(f"keypoint {i} is not on face {f}")
            others = np.delete(s[i], f)
            if others.size and others.max() >= -tol:
                raise InvalidInput(f"keypoint {i} is not interior to face {f}")

    def visible(self, o):
        """Faces whose outward side contains the point o."""
        return self.normals @ o + self.offsets > 0


def _region_vertices(rows, margin, box=1e3):
    """Vertices of {o : a.o + b >= margin for each row, |o_k| <= box}.

    Brute force over triples of bounding planes; at most 3 face rows plus 6
    box planes, so 84 tiny solves.
    """
    a = [np.asarray(r[0], dtype=float) for r in rows] + list(np.vstack([np.eye(3), -np.eye(3)]))
    rhs = [margin - r[1] for r in rows] + [-box] * 6
    A, h = np.array(a), np.array(rhs)
    combos = np.array(list(itertools.combinations(range(len(a)), 3)))
    M = A[combos]
    ok = np.abs(np.linalg.det(M)) > 1e-12
    V = np.linalg.solve(M[ok], h[combos[ok]][..., None])[..., 0]
    feasible = np.all(V @ A.T - h >= -1e-9 * (1 + np.abs(h)), axis=1)
    return V[feasible]


def build_winding_dictionary_lp(shape, keypoints, margin=LP_MARGIN, method="vertices"):
    """Winding dictionary of a convex polyhedron from covisibility regions.

    For triplet (i, j, m) with n = (b_j - b_i) x (b_m - b_i), the camera center
    must see all three faces; if it can also sit where (o - b_i).n > 0 the
    observed determinant is negative, and where (o - b_i).n < 0 it is positive.
    Each side is a linear feasibility problem. method="linprog" solves the two
    LPs with HiGHS; method="vertices" (default) enumerates the vertices of the
    covisibility region once per face set and reads both answers off them.
    """
    if method not in ("vertices", "linprog"):
        raise InvalidInput("method must be 'vertices' or 'linprog'")
    b = np.asarray(keypoints, dtype=float)
    shape.check_keypoints(b)
    N = b.shape[0]
    table = {}
    regions = {}
    for i, j, m in triplets(N):
        n = np.cross(b[j] - b[i], b[m] - b[i])
        norm = np.linalg.norm(n)
        if norm < 1e-9:
            warnings.warn(
                DictionaryEntryUndefined(f"degenerate triplet {(i, j, m)}"), stacklevel=2
            )
            table[(i, j, m)] = {1, -1}
            continue
        n = n / norm
        faces = tuple(sorted({int(shape.keypoint_face[k]) for k in (i, j, m)}))
        rows = [(shape.normals[f], shape.offsets[f]) for f in faces]
        signs = set()
        if method == "linprog":
            if lp_feasible(LpFeasibility(tuple(rows + [(n, -n @ b[i])]), margin))[0]:
                signs.add(-1)
            if lp_feasible(LpFeasibility(tuple(rows + [(-n, n @ b[i])]), margin))[0]:
                signs.add(1)
        else:
            if faces not in regions:
                regions[faces] = _region_vertices(rows, margin)
            V = regions[faces]
            if V.size:
                side = V @ n - n @ b[i]
                if side.max() >= margin:
                    signs.add(-1)
                if side.min() <= -margin:
                    signs.add(1)
        table[(i, j, m)] = signs
    return WindingDictionary(N, table)


def learn_winding_dictionary(N, annotated):
    """Union of observed signs; triplets never observed allow both signs."""
    seen = {}
    for key, sign in annotated:
        key = tuple(int(k) for k in key)
        if sign == 0:
            continue
        seen.setdefault(key, set()).add(int(sign))
    table = {key: seen.get(key, {1, -1}) for key in triplets(N)}
    return WindingDictionary(N, table)


def test_triplet_2d(zi, zj, zm, dicts, key):
    """True iff the observed winding order is allowed by some dictionary."""
    s = winding_order_2d(zi, zj, zm)
    return any(s in d[key] for d in dicts)


def triplet_compatibility(pixels, dicts):
    """Boolean vector over sorted triplets (combinations order)."""
    z = np.asarray(pixels, dtype=float)
    idx = np.array(triplets(z.shape[0]))
    a = z[idx[:, 1]] - z[idx[:, 0]]
    b = z[idx[:, 2]] - z[idx[:, 0]]
    s = np.sign(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    ok = np.zeros(len(idx), dtype=bool)
    for d in dicts:
        plus, minus = d.masks()
        ok |= ((s > 0) & plus) | ((s < 0) & minus)
    return ok


# --------------------------------------------------------------- hypergraphs

@dataclass
class CompatibilityHypergraph:
    N: int
    n: int
    edges: set = field(default_factory=set)

    def __post_init__(self):
        if self.n not in (2, 3):
            raise InvalidInput("uniformity must be 2 or 3")
        edges = set()
        for e in self.edges:
            e = tuple(sorted(int(v) for v in e))
            if len(set(e)) != self.n or e[0] < 0 or e[-1] >= self.N:
                raise InvalidInput(f"bad hyperedge {e}")
            edges.add(e)
        self.edges = edges

    @property
    def nodes(self):
        return list(range(self.N))

    def is_hyperclique(self, nodes):
        return all(e in self.edges for e in itertools.combinations(sorted(nodes), self.n))


def build_compatibility_graph(N, n, test):
    edges = {e for e in itertools.combinations(range(N), n) if test(e)}
    return CompatibilityHypergraph(N, n, edges)


def _bits(it):
    out = 0
    for v in it:
        out |= 1 << v
    return out


def _members(bits):
    out = []
    while bits:
        low = bits & -bits
        out.append(low.bit_length() - 1)
        bits ^= low
    return out


def _suffix_color_bounds(cand, adj):
    """Greedy colouring from the back; entry k bounds the clique size in cand[k:]."""
    classes = []
    bounds = [0] * len(cand)
    for k in range(len(cand) - 1, -1, -1):
        v = cand[k]
        for ci, cls in enumerate(classes):
            if not cls & adj[v]:
                classes[ci] = cls | (1 << v)
                break
        else:
            classes.append(1 << v)
        bounds[k] = len(classes)
    return bounds


def _clique_search(N, adj_of, start_cand):
    """Lexicographic depth-first branch and bound.

    adj_of(clique, cand) returns adjacency bitsets restricted to cand that
    describe which candidates can join the clique together. Cliques are
    visited in lexicographic order and only strictly larger ones replace the
    incumbent, so the lexicographically smallest maximum clique is returned.
    """
    best = []

    def search(clique, cand):
        nonlocal best
        adj = adj_of(clique, cand)
        bounds = _suffix_color_bounds(cand, adj)
        for k, v in enumerate(cand):
            if len(clique) + bounds[k] <= len(best):
                return
            nxt = [u for u in cand[k + 1:] if adj[v] >> u & 1]
            grown = clique + [v]
            if not nxt:
                if len(grown) > len(best):
                    best = grown
            else:
                search(grown, nxt)

    if start_cand:
        search([], start_cand)
    return best


def max_clique(g):
    if g.n != 2:
        raise InvalidInput("max_clique needs a graph (n = 2)")
    adj = [0] * g.N
    for a, b in g.edges:
        adj[a] |= 1 << b
        adj[b] |= 1 << a

    def adj_of(clique, cand):
        mask = _bits(cand)
        return {v: adj[v] & mask for v in cand}

    return _clique_search(g.N, adj_of, list(range(g.N)))


def max_hyperclique(g):
    """Exact maximum hyperclique of a 2- or 3-uniform hypergraph.

    Branch and bound over the 0/1 inclusion variables: a node may join the
    current set only if no non-edge becomes fully selected. The bound is a
    greedy colouring of the graph of candidate pairs that are jointly
    admissible, which is an independent-set partition bound.
    """
    if g.n == 2:
        return max_clique(g)
    link = {}
    for a, b, c in g.edges:
        for x, y, z in ((a, b, c), (a, c, b), (b, c, a)):
            link[(x, y)] = link.get((x, y), 0) | (1 << z)
            link[(y, x)] = link.get((y, x), 0) | (1 << z)

    def adj_of(clique, cand):
        mask = _bits(cand)
        if not clique:
            return {v: mask & ~(1 << v) for v in cand}
        out = {}
        for u in cand:
            bits = mask
            for a in clique:
                bits &= link.get((a, u), 0)
            out[u] = bits
        return out

    return _clique_search(g.N, adj_of, list(range(g.N)))


# --------------------------------------------------------------------- ROBIN

@dataclass(frozen=True)
class Pair3D:
    bounds: PairBounds
    beta: float


@dataclass(frozen=True)
class Triplet2D:
    dicts: tuple


@dataclass
class RobinResult:
    inliers: np.ndarray
    graph: CompatibilityHypergraph
    degenerate: bool = False


def robin(measurements, invariant):
    """Prune outliers by keeping the maximum (hyper)clique of compatible sets."""
    if isinstance(invariant, Pair3D):
        pts = measurements.points
        N, n = pts.shape[0], 2
        ok = pair_compatibility(pts, invariant.bounds, invariant.beta)
        iu = np.argwhere(np.triu(ok, 1))
        edges = set(map(tuple, iu.tolist()))
    elif isinstance(invariant, Triplet2D):
        z = measurements.pixels
        N, n = z.shape[0], 3
        ok = triplet_compatibility(z, invariant.dicts)
        edges = {t for t, keep in zip(triplets(N), ok) if keep}
    else:
        raise InvalidInput("unknown invariant")
    graph = CompatibilityHypergraph(N, n, edges)
    if N < n:
        return RobinResult(np.arange(N), graph, degenerate=True)
    nodes = max_hyperclique(graph)
    return RobinResult(np.array(sorted(nodes), dtype=int), graph)
