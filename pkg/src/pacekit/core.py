"""Shared data types and geometric primitives."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

ORTHO_TOL = 1e-9
SUM_TOL = 1e-9
CERT_TOL = 1e-6


class PaceError(Exception):
    """Base class for all library errors."""


class DegenerateProjection(PaceError):
    pass


class BehindCamera(PaceError):
    pass


class InvalidInput(PaceError):
    pass


def _as_rotation_matrix(m):
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise InvalidInput("rotation must be a finite 3x3 matrix")
    return m


@dataclass(frozen=True)
class Rotation:
    m: np.ndarray

    def __post_init__(self):
        m = _as_rotation_matrix(self.m)
        if np.abs(m.T @ m - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(m) - 1) > ORTHO_TOL:
            raise InvalidInput("matrix is not in SO(3)")
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(3))


@dataclass(frozen=True)
class Pose:
    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise InvalidInput("translation must be finite")
        object.__setattr__(self, "translation", t)

    @property
    def R(self):
        return self.rotation.m

    @property
    def t(self):
        return self.translation


@dataclass(frozen=True)
class ShapeLibrary:
    """K models of N keypoints each, stored as a (K, N, 3) array."""

    keypoints: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.keypoints, dtype=float)
        if b.ndim != 3 or b.shape[2] != 3:
            raise InvalidInput("library keypoints must have shape (K, N, 3)")
        if b.shape[0] < 1 or b.shape[1] < 3:
            raise InvalidInput("library needs K >= 1 and N >= 3")
        if not np.all(np.isfinite(b)):
            raise InvalidInput("library keypoints must be finite")
        object.__setattr__(self, "keypoints", b)

    @property
    def K(self):
        return self.keypoints.shape[0]

    @property
    def N(self):
        return self.keypoints.shape[1]

    def shape(self, c):
        """Keypoints of the convex combination with coefficients c, shape (N, 3)."""
        return np.einsum("k,kni->ni", np.asarray(c, dtype=float), self.keypoints)

    def mean_shape(self):
        return self.keypoints.mean(axis=0)

    def subset(self, idx):
        return ShapeLibrary(self.keypoints[:, np.asarray(idx), :])


@dataclass(frozen=True)
class ShapeCoeffs:
    c: np.ndarray
    simplex: bool = False

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if not np.all(np.isfinite(c)):
            raise InvalidInput("shape coefficients must be finite")
        if abs(c.sum() - 1) > SUM_TOL * max(1.0, np.abs(c).sum()):
            raise InvalidInput("shape coefficients must sum to one")
        if self.simplex and c.min() < -SUM_TOL:
            raise InvalidInput("shape coefficients must be nonnegative")
        object.__setattr__(self, "c", c)

    @property
    def K(self):
        return self.c.size


def _check_weights(weights, n):
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.size != n:
        raise InvalidInput("one weight per measurement is required")
    if not np.all(np.isfinite(w)) or w.min() < 0:
        raise InvalidInput("weights must be finite and nonnegative")
    return w


@dataclass(frozen=True)
class Keypoints3D:
    points: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        y = np.asarray(self.points, dtype=float)
        if y.ndim != 2 or y.shape[1] != 3 or y.shape[0] < 3:
            raise InvalidInput("need at least 3 points of shape (N, 3)")
        if not np.all(np.isfinite(y)):
            raise InvalidInput("points must be finite")
        object.__setattr__(self, "points", y)
        object.__setattr__(self, "weights", _check_weights(self.weights, y.shape[0]))

    @property
    def N(self):
        return self.points.shape[0]

    def with_weights(self, weights):
        return Keypoints3D(self.points, weights)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Keypoints3D(self.points[idx], self.weights[idx])


@dataclass(frozen=True)
class Keypoints2D:
    pixels: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        z = np.asarray(self.pixels, dtype=float)
        if z.ndim != 2 or z.shape[1] != 2 or z.shape[0] < 4:
            raise InvalidInput("need at least 4 pixels of shape (N, 2)")
        if not np.all(np.isfinite(z)):
            raise InvalidInput("pixels must be finite")
        object.__setattr__(self, "pixels", z)
        object.__setattr__(self, "weights", _check_weights(self.weights, z.shape[0]))

    @property
    def N(self):
        return self.pixels.shape[0]

    def with_weights(self, weights):
        return Keypoints2D(self.pixels, weights)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Keypoints2D(self.pixels[idx], self.weights[idx])


class Status(str, Enum):
    CERTIFIED = "CertifiedOptimal"
    ROUNDED = "Rounded"
    FAILED = "Failed"


@dataclass
class EstimationResult:
    pose: Pose
    coeffs: ShapeCoeffs
    gap: float
    cost: float
    weights: np.ndarray
    status: Status
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.status == Status.CERTIFIED and not self.gap <= CERT_TOL:
            raise InvalidInput("certified result with gap above tolerance")

    @property
    def R(self):
        return self.pose.R

    @property
    def t(self):
        return self.pose.t

    @property
    def c(self):
        return self.coeffs.c


def project_to_so3(m):
    """Nearest rotation in Frobenius norm.

    Raises DegenerateProjection when m has rank below 2, where the
    projection is not unique.
    """
    m = _as_rotation_matrix(m)
    u, s, vt = np.linalg.svd(m)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateProjection("matrix has rank < 2")
    d = np.sign(np.linalg.det(u @ vt))
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    return Rotation(r)


def project_to_simplex(v):
    """Euclidean projection onto the probability simplex (sort based)."""
    v = np.asarray(v, dtype=float).reshape(-1)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = ind[u - css / ind > 0][-1]
    theta = css[rho - 1] / rho
    w = np.maximum(v - theta, 0.0)
    # remove the last ulp of drift so the sum is one to machine precision
    w /= w.sum()
    return ShapeCoeffs(w, simplex=True)


def perspective_project(p):
    p = np.asarray(p, dtype=float)
    if np.any(p[..., 2] <= 0):
        raise BehindCamera("point has nonpositive depth")
    return p[..., :2] / p[..., 2:3]


def bearing(z):
    z = np.asarray(z, dtype=float)
    h = np.concatenate([z, np.ones(z.shape[:-1] + (1,))], axis=-1)
    return h / np.linalg.norm(h, axis=-1, keepdims=True)


def rotation_angle_deg(ra, rb):
    """Geodesic angle acos((tr(ra^T rb) - 1) / 2) in degrees.

    Evaluated as atan2(sin, cos) so small angles keep full precision.
    """
    m = np.asarray(ra).T @ np.asarray(rb)
    cos = (np.trace(m) - 1.0) / 2.0
    sin = np.linalg.norm([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) / 2.0
    return float(np.degrees(np.arctan2(sin, cos)))


def errors(estimate, truth):
    """Return (rotation error in degrees, translation error, shape error)."""
    pose, coeffs = truth
    r_true = pose.R if isinstance(pose, Pose) else np.asarray(pose[0])
    t_true = pose.t if isinstance(pose, Pose) else np.asarray(pose[1])
    c_true = coeffs.c if isinstance(coeffs, ShapeCoeffs) else np.asarray(coeffs)
    return (
        rotation_angle_deg(estimate.R, r_true),
        float(np.linalg.norm(estimate.t - t_true)),
        float(np.linalg.norm(estimate.c - c_true)),
    )


def random_rotation(rng):
    """Uniform rotation from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return quat_to_matrix(q)


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def hat(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def expm_so3(w):
    """Rodrigues formula."""
    theta = np.linalg.norm(w)
    k = hat(w)
    if theta < 1e-12:
        return np.eye(3) + k
    return np.eye(3) + np.sin(theta) / theta * k + (1 - np.cos(theta)) / theta**2 * (k @ k)
