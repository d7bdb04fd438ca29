import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pacekit.core import (
    BehindCamera,
    DegenerateProjection,
    InvalidInput,
    Keypoints2D,
    Keypoints3D,
    Pose,
    Rotation,
    ShapeCoeffs,
    ShapeLibrary,
    bearing,
    expm_so3,
    perspective_project,
    project_to_simplex,
    project_to_so3,
    random_rotation,
    rotation_angle_deg,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def simplex_projection_by_bisection(v):
    # theta solves sum(max(v - theta, 0)) = 1
    lo, hi = v.min() - 1.0, v.max()
    for _ in range(200):
        mid = (lo + hi) / 2
        if np.maximum(v - mid, 0).sum() > 1:
            lo = mid
        else:
            hi = mid
    return np.maximum(v - (lo + hi) / 2, 0)


@given(arrays(float, st.integers(1, 12), elements=finite))
def test_simplex_projection_matches_bisection(v):
    c = project_to_simplex(v).c
    assert abs(c.sum() - 1) < 1e-12
    assert c.min() >= 0
    np.testing.assert_allclose(c, simplex_projection_by_bisection(v), atol=1e-9)


@given(arrays(float, st.integers(2, 8), elements=finite), st.integers(0, 2**31))
def test_simplex_projection_is_nearest(v, seed):
    c = project_to_simplex(v).c
    other = np.random.default_rng(seed).dirichlet(np.ones(v.size))
    assert np.sum((c - v) ** 2) <= np.sum((other - v) ** 2) + 1e-12


@given(arrays(float, (3, 3), elements=finite))
def test_so3_projection_is_rotation_and_nearest(m):
    try:
        r = project_to_so3(m).m
    except DegenerateProjection:
        assert np.linalg.matrix_rank(m, tol=1e-9 * max(1, np.abs(m).max())) < 3
        return
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)
    assert np.linalg.det(r) > 0
    for seed in range(5):
        q = random_rotation(np.random.default_rng(seed))
        assert np.linalg.norm(r - m) <= np.linalg.norm(q - m) + 1e-9


def test_so3_projection_rank_one_raises():
    with pytest.raises(DegenerateProjection):
        project_to_so3(np.outer([1, 2, 3], [1, 0, 0]))


@given(st.integers(0, 2**31), st.floats(1e-8, 3.1))
def test_rotation_angle_recovers_axis_angle(seed, angle):
    rng = np.random.default_rng(seed)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    ra = random_rotation(rng)
    rb = ra @ expm_so3(angle * axis)
    assert abs(rotation_angle_deg(ra, rb) - np.degrees(angle)) < 1e-7 * max(1, np.degrees(angle))


def test_rotation_rejects_non_orthogonal():
    with pytest.raises(InvalidInput):
        Rotation(np.diag([1.0, 1.0, 2.0]))
    with pytest.raises(InvalidInput):
        Rotation(np.diag([1.0, 1.0, -1.0]))


def test_shape_coeffs_must_sum_to_one():
    ShapeCoeffs([0.5, 0.7, -0.2])
    with pytest.raises(InvalidInput):
        ShapeCoeffs([0.5, 0.6])
    with pytest.raises(InvalidInput):
        ShapeCoeffs([1.2, -0.2], simplex=True)


def test_library_validation_and_shape():
    kp = np.arange(2 * 4 * 3, dtype=float).reshape(2, 4, 3)
    lib = ShapeLibrary(kp)
    np.testing.assert_allclose(lib.shape([0.25, 0.75]), 0.25 * kp[0] + 0.75 * kp[1])
    assert lib.subset([0, 2, 3]).N == 3
    with pytest.raises(InvalidInput):
        ShapeLibrary(np.zeros((2, 2, 3)))
    with pytest.raises(InvalidInput):
        ShapeLibrary(np.full((1, 4, 3), np.nan))


def test_measurement_validation():
    with pytest.raises(InvalidInput):
        Keypoints3D(np.zeros((2, 3)))
    with pytest.raises(InvalidInput):
        Keypoints2D(np.zeros((3, 2)))
    with pytest.raises(InvalidInput):
        Keypoints3D(np.zeros((4, 3)), weights=[1, 1, -1, 1])
    m = Keypoints3D(np.zeros((4, 3)))
    np.testing.assert_array_equal(m.weights, np.ones(4))


def test_projection_and_bearing():
    p = np.array([[1.0, 2.0, 4.0]])
    np.testing.assert_allclose(perspective_project(p), [[0.25, 0.5]])
    with pytest.raises(BehindCamera):
        perspective_project(np.array([1.0, 1.0, -1.0]))
    b = bearing(np.array([0.25, 0.5]))
    np.testing.assert_allclose(b, np.array([1.0, 2.0, 4.0]) / np.sqrt(21))


def test_pose_rejects_nonfinite_translation():
    with pytest.raises(InvalidInput):
        Pose(Rotation.identity(), [0, np.inf, 0])
