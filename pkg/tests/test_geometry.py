import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planecalib.errors import InvalidIntrinsics, NonPositiveDepth
from planecalib.geometry import (
    CameraIntrinsics,
    Se3,
    axis_angle_quat,
    compose,
    distort_normalized,
    inverse,
    project,
    project_jacobians,
    quat_to_matrix,
    rotation_angle_between,
    se3_plus,
    so3_exp,
    so3_log,
    transform,
    undistort_normalized,
    unproject,
)

finite = st.floats(-3.0, 3.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
quat = st.tuples(*[st.floats(-1, 1) for _ in range(4)]).filter(lambda q: np.linalg.norm(q) > 0.1).map(np.array)
poses = st.builds(Se3, quat, vec3)


def test_project_principal_point(pinhole):
    np.testing.assert_array_equal(project([0.0, 0.0, 2.0], pinhole), [320.0, 240.0])


def test_project_hand_evaluated(pinhole):
    np.testing.assert_allclose(project([1.0, 0.0, 2.0], pinhole), [570.0, 240.0], atol=1e-12)


def test_project_behind_camera(pinhole):
    with pytest.raises(NonPositiveDepth):
        project([0.0, 0.0, -1.0], pinhole)


def test_unproject_principal_point(pinhole):
    np.testing.assert_allclose(unproject([320.0, 240.0], pinhole), [0.0, 0.0, 1.0], atol=1e-15)


def test_pinhole_round_trip(pinhole):
    rng = np.random.default_rng(0)
    x = rng.uniform([0, 0], [640, 480], size=(500, 2))
    np.testing.assert_allclose(project(unproject(x, pinhole) * 5.0, pinhole), x, atol=1e-9)


def test_distorted_round_trip_on_grid():
    D = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, -0.1, 0.01)
    g = np.stack(np.meshgrid(np.arange(0, 641, 16.0), np.arange(0, 481, 16.0)), -1).reshape(-1, 2)
    np.testing.assert_allclose(project(unproject(g, D), D), g, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(k1=st.floats(-0.3, 0.3), k2=st.floats(-0.05, 0.05))
def test_round_trip_over_distortion_range(k1, k2):
    try:
        D = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, k1, k2)
    except InvalidIntrinsics:
        return  # non-monotone models are rejected at construction
    g = np.stack(np.meshgrid(np.arange(0, 641, 40.0), np.arange(0, 481, 40.0)), -1).reshape(-1, 2)
    np.testing.assert_allclose(project(unproject(g, D), D), g, atol=1e-8)


def test_undistort_inverts_forward_model():
    rng = np.random.default_rng(3)
    xy = rng.uniform(-0.6, 0.6, size=(200, 2))
    back = undistort_normalized(distort_normalized(xy, -0.12, 0.03), -0.12, 0.03)
    np.testing.assert_allclose(back, xy, atol=1e-11)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(fx=-1.0, fy=500.0, cx=320.0, cy=240.0),
        dict(fx=500.0, fy=500.0, cx=700.0, cy=240.0),
        dict(fx=500.0, fy=500.0, cx=320.0, cy=0.0),
        dict(fx=500.0, fy=500.0, cx=320.0, cy=240.0, k1=-2.0),
    ],
)
def test_invalid_intrinsics(kwargs):
    with pytest.raises(InvalidIntrinsics):
        CameraIntrinsics(**kwargs)


def test_project_jacobians_match_finite_differences(distorted):
    rng = np.random.default_rng(7)
    P = rng.uniform([-1, -1, 2], [1, 1, 6], size=(100, 3))
    params = distorted.as_array()
    _, Jp, Jd, _ = project_jacobians(P, params)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        num = (project_jacobians(P + e, params)[0] - project_jacobians(P - e, params)[0]) / (2 * h)
        assert np.max(np.abs(num - Jp[:, :, k])) / np.max(np.abs(num)) < 1e-5
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        num = (project_jacobians(P, params + e)[0] - project_jacobians(P, params - e)[0]) / (2 * h)
        assert np.max(np.abs(num - Jd[:, :, k])) / np.max(np.abs(num)) < 1e-5


def test_compose_identity_and_transform_identity():
    rng = np.random.default_rng(1)
    T = Se3(axis_angle_quat([1, 2, 3], 0.7), [1.0, -2.0, 0.5])
    I = Se3.identity()
    assert np.array_equal(compose(T, I).rotation, T.rotation)
    np.testing.assert_allclose(compose(T, I).translation, T.translation, atol=0)
    p = rng.normal(size=(10, 3))
    np.testing.assert_array_equal(transform(I, p), p)


@settings(max_examples=100, deadline=None)
@given(T=poses, p=vec3)
def test_inverse_undoes_transform(T, p):
    np.testing.assert_allclose(transform(inverse(T), transform(T, p)), p, atol=1e-10)
    E = compose(T, inverse(T))
    assert np.radians(rotation_angle_between(E, Se3.identity())) < 1e-10
    assert np.linalg.norm(E.translation) < 1e-10 * max(1.0, np.linalg.norm(T.translation))


@settings(max_examples=100, deadline=None)
@given(a=poses, b=poses, c=poses)
def test_group_axioms(a, b, c):
    left = compose(compose(a, b), c)
    right = compose(a, compose(b, c))
    assert rotation_angle_between(left, right) < 1e-8
    np.testing.assert_allclose(left.translation, right.translation, atol=1e-10)
    for T in (left, right, inverse(a)):
        assert abs(np.linalg.norm(T.rotation) - 1.0) < 1e-12


def test_rotation_angle_examples():
    a = Se3(axis_angle_quat([0.3, -0.2, 0.9], 1.1))
    assert rotation_angle_between(a, a) == 0.0
    b = compose(a, Se3(axis_angle_quat([0, 0, 1], np.radians(1.0))))
    assert abs(rotation_angle_between(a, b) - 1.0) < 1e-9
    c = compose(a, Se3(axis_angle_quat([1, 0, 0], np.pi)))
    assert abs(rotation_angle_between(a, c) - 180.0) < 1e-9


@settings(max_examples=50, deadline=None)
@given(a=quat, b=quat)
def test_rotation_angle_matches_trace_formula(a, b):
    Ra, Rb = quat_to_matrix(a / np.linalg.norm(a)), quat_to_matrix(b / np.linalg.norm(b))
    c = np.clip((np.trace(Ra @ Rb.T) - 1) / 2, -1, 1)
    assert abs(rotation_angle_between(a, b) - np.degrees(np.arccos(c))) < 1e-5


@settings(max_examples=50, deadline=None)
@given(w=st.tuples(*[st.floats(-1.8, 1.8) for _ in range(3)]).map(np.array))
def test_exp_log_round_trip(w):
    np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-9)


def test_se3_plus_left_increment():
    x = Se3(axis_angle_quat([1, 0, 1], 0.4), [1.0, 2.0, 3.0])
    d = np.array([0.01, -0.02, 0.03, 0.1, 0.2, 0.3])
    y = Se3.from_array(se3_plus(x.as_array(), d))
    np.testing.assert_allclose(y.R, quat_to_matrix(so3_exp(d[:3])) @ x.R, atol=1e-12)
    np.testing.assert_allclose(y.translation, x.translation + d[3:], atol=1e-15)


def test_se3_keeps_normalised_input_bit_identical():
    q = axis_angle_quat([0.2, 0.5, -0.1], 0.3)
    assert np.array_equal(Se3(q).rotation, q)
    assert abs(np.linalg.norm(Se3([2.0, 0.0, 0.0, 0.0]).rotation) - 1.0) < 1e-15
