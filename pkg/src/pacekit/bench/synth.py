"""Synthetic instances for the 3D and 2D experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import (
    InvalidInput,
    Keypoints2D,
    Keypoints3D,
    Pose,
    Rotation,
    ShapeCoeffs,
    ShapeLibrary,
    random_rotation,
)
from ..robin import ConvexShapeModel


@dataclass(frozen=True)
class SynthConfig3D:
    N: int = 100
    K: int = 10
    sigma: float = 0.01
    outlier_rate: float = 0.0
    intra_class_radius: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(np.floor(self.outlier_rate * self.N)) > self.N - 3:
            raise InvalidInput("too many outliers: need at least 3 inliers")
        if not 0 <= self.outlier_rate < 1:
            raise InvalidInput("outlier rate must be in [0, 1)")


@dataclass(frozen=True)
class SynthConfig2D:
    N: int = 10
    K: int = 3
    sigma: float = 0.01
    outlier_rate: float = 0.0
    camera_radius: float = 3.0
    seed: int = 0
    library: str = "octahedra"  # or "gaussian"
    outlier_spread: float = 1.0  # outlier pixels span this multiple of the object's image extent

    def __post_init__(self):
        if int(np.floor(self.outlier_rate * self.N)) > self.N - 4:
            raise InvalidInput("too many outliers: need at least 4 inliers")
        if not 0 <= self.outlier_rate < 1:
            raise InvalidInput("outlier rate must be in [0, 1)")
        if not self.outlier_spread > 0:
            raise InvalidInput("outlier_spread must be positive")
        if self.library not in ("octahedra", "gaussian"):
            raise InvalidInput(f"unknown library kind {self.library!r}")


def random_simplex_coeffs(rng, K):
    c = rng.uniform(0.0, 1.0, K)
    return c / c.sum()


def gen_synthetic_3d(cfg):
    """Returns (library, measurements, (pose, coeffs), inlier_mask)."""
    rng = np.random.default_rng(cfg.seed)
    N, K = cfg.N, cfg.K
    if cfg.intra_class_radius == 0:
        keypoints = rng.standard_normal((K, N, 3))
    else:
        mean = rng.standard_normal((N, 3))
        keypoints = mean[None] + cfg.intra_class_radius * rng.standard_normal((K, N, 3))
    lib = ShapeLibrary(keypoints)
    c = random_simplex_coeffs(rng, K)
    R = random_rotation(rng)
    t = rng.standard_normal(3)
    y = lib.shape(c) @ R.T + t + cfg.sigma * rng.standard_normal((N, 3))
    n_out = int(np.floor(cfg.outlier_rate * N))
    inlier = np.ones(N, dtype=bool)
    if n_out:
        out_idx = rng.permutation(N)[:n_out]
        y[out_idx] = rng.standard_normal((n_out, 3))
        inlier[out_idx] = False
    truth = (Pose(Rotation(R), t), ShapeCoeffs(c, simplex=True))
    return lib, Keypoints3D(y), truth, inlier


# ------------------------------------------------------------------- 2D

OCTANTS = np.array(
    [[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=float
)


def octahedron_vertices(radii):
    """Six vertices on the axes; radii ordered (+x, -x, +y, -y, +z, -z)."""
    r = np.asarray(radii, dtype=float)
    return np.array(
        [[r[0], 0, 0], [-r[1], 0, 0], [0, r[2], 0], [0, -r[3], 0], [0, 0, r[4]], [0, 0, -r[5]]]
    )


def octahedron_face_vertices(radii, face):
    """The three vertices of the face in octant `face` (ordered x, y, z)."""
    v = octahedron_vertices(radii)
    sx, sy, sz = OCTANTS[face]
    return np.array([v[0 if sx > 0 else 1], v[2 if sy > 0 else 3], v[4 if sz > 0 else 5]])


def octahedron_faces(radii):
    """Outward unit normals n and offsets b with n.p + b = 0 on each face plane.

    Inside the solid every face satisfies n.p + b <= 0.
    """
    normals, offsets = [], []
    for f in range(8):
        a, b_, c = octahedron_face_vertices(radii, f)
        n = np.cross(b_ - a, c - a)
        n /= np.linalg.norm(n)
        if n @ a < 0:
            n = -n
        normals.append(n)
        offsets.append(-n @ a)
    return np.array(normals), np.array(offsets)


def look_at_rotation(center, rng):
    """Rotation whose camera z axis points from `center` to the origin, random roll."""
    z = -center / np.linalg.norm(center)
    tmp = rng.standard_normal(3)
    x = tmp - (tmp @ z) * z
    x /= np.linalg.norm(x)
    yv = np.cross(z, x)
    # rows of R are the camera axes expressed in the object frame
    return np.vstack([x, yv, z])


def random_unit(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _barycentric(rng, n, margin=0.05):
    w = rng.dirichlet(np.ones(3), size=n)
    return margin + (1 - 3 * margin) * w


def gen_synthetic_2d(cfg):
    """Returns (library, shape_models, measurements, (pose, coeffs), inlier_mask).

    Octahedra mode: keypoint i lies on the same octant face of every model, so
    convex combinations keep it on that face. Inliers sit on faces visible from
    the camera; outliers sit on hidden faces and their pixel is replaced by a
    uniform draw inside the image bounding square of the object.
    Gaussian mode: i.i.d. N(0, I) library, no shape models, no outliers.
    """
    rng = np.random.default_rng(cfg.seed)
    if cfg.library == "gaussian":
        return _gen_gaussian_2d(cfg, rng)
    N, K = cfg.N, cfg.K
    radii = rng.uniform(0.5, 2.0, (K, 6))
    c = random_simplex_coeffs(rng, K)
    mix_radii = c @ radii
    normals, offsets = octahedron_faces(mix_radii)
    center = cfg.camera_radius * random_unit(rng)
    R = look_at_rotation(center, rng)
    t = -R @ center
    visible = normals @ center + offsets > 0
    vis_faces = np.flatnonzero(visible)
    hid_faces = np.flatnonzero(~visible)

    n_out = int(np.floor(cfg.outlier_rate * N))
    inlier = np.ones(N, dtype=bool)
    inlier[rng.permutation(N)[:n_out]] = False
    faces = np.where(
        inlier, rng.choice(vis_faces, N), rng.choice(hid_faces, N) if hid_faces.size else 0
    )
    bary = _barycentric(rng, N)
    keypoints = np.empty((K, N, 3))
    for k in range(K):
        for i in range(N):
            keypoints[k, i] = bary[i] @ octahedron_face_vertices(radii[k], faces[i])
    lib = ShapeLibrary(keypoints)

    cam = lib.shape(c) @ R.T + t
    z = cam[:, :2] / cam[:, 2:3] + cfg.sigma * rng.standard_normal((N, 2))
    if n_out:
        corners = octahedron_vertices(mix_radii) @ R.T + t
        proj = corners[:, :2] / corners[:, 2:3]
        lo, hi = proj.min(axis=0), proj.max(axis=0)
        side = (hi - lo).max() * cfg.outlier_spread
        mid = (hi + lo) / 2
        z[~inlier] = mid + side * (rng.uniform(size=(n_out, 2)) - 0.5)

    models = []
    for k in range(K):
        nk, bk = octahedron_faces(radii[k])
        models.append(ConvexShapeModel(nk, bk, faces.copy()))
    truth = (Pose(Rotation(R), t), ShapeCoeffs(c, simplex=True))
    return lib, models, Keypoints2D(z), truth, inlier


def _gen_gaussian_2d(cfg, rng, min_depth=0.1):
    N, K = cfg.N, cfg.K
    keypoints = rng.standard_normal((K, N, 3))
    lib = ShapeLibrary(keypoints)
    c = random_simplex_coeffs(rng, K)
    shape = lib.shape(c)
    while True:
        center = cfg.camera_radius * random_unit(rng)
        R = look_at_rotation(center, rng)
        t = -R @ center
        cam = shape @ R.T + t
        if cam[:, 2].min() > min_depth:
            break
    z = cam[:, :2] / cam[:, 2:3] + cfg.sigma * rng.standard_normal((N, 2))
    truth = (Pose(Rotation(R), t), ShapeCoeffs(c, simplex=True))
    return lib, [], Keypoints2D(z), truth, np.ones(N, dtype=bool)
