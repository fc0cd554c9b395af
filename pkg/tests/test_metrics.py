import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planecalib.geometry import CameraIntrinsics, Se3, axis_angle_quat, compose, project, unproject
from planecalib.metrics import CalibrationError, calibration_error, extrinsic_error, intrinsic_error, pixel_grid

from conftest import random_se3


def test_identical_transforms():
    T = Se3(axis_angle_quat([1, 2, 3], 0.4), [0.1, 0.2, 0.3])
    assert extrinsic_error(T, T) == (0.0, 0.0)


def test_three_four_five_translation():
    T = Se3(axis_angle_quat([0, 1, 0], 0.2), [1.0, 1.0, 1.0])
    U = Se3(T.rotation, T.translation + [0.03, 0.04, 0.0])
    rot, cm = extrinsic_error(U, T)
    assert rot == 0.0
    assert cm == pytest.approx(5.0, abs=1e-12)


def test_one_degree_about_a_random_axis():
    rng = np.random.default_rng(0)
    for _ in range(20):
        T = random_se3(rng)
        U = compose(Se3(axis_angle_quat(rng.normal(size=3), np.radians(1.0))), Se3(T.rotation))
        U = Se3(U.rotation, T.translation)
        rot, cm = extrinsic_error(U, T)
        assert abs(rot - 1.0) < 1e-9 and cm == 0.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_rotation_error_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = random_se3(rng), random_se3(rng)
    assert extrinsic_error(a, b) == pytest.approx(extrinsic_error(b, a), abs=1e-9)
    assert 0 <= extrinsic_error(a, b)[0] <= 180


def test_identical_intrinsics_have_zero_error(distorted, pinhole):
    assert intrinsic_error(distorted, distorted) < 1e-9
    assert intrinsic_error(pinhole, pinhole) == 0.0


def test_principal_point_shift_is_exact(pinhole):
    D = pinhole
    shifted = CameraIntrinsics(D.fx, D.fy, D.cx + 2.0, D.cy, 0.0, 0.0, D.width, D.height)
    assert intrinsic_error(shifted, D) == pytest.approx(2.0, abs=1e-12)


def brute_force_error(D_star, D_gt):
    """Row-by-row evaluation over the full 1..w x 1..h grid through the public projection API."""
    total = 0.0
    u = np.arange(1, D_gt.width + 1, dtype=float)
    for v in range(1, D_gt.height + 1):
        px = np.stack([u, np.full_like(u, v)], axis=-1)
        back = project(unproject(px, D_gt), D_star)
        total += np.sum(np.hypot(*(back - px).T))
    return total / (D_gt.width * D_gt.height)


def test_scaled_focal_matches_brute_force(distorted):
    D = distorted
    star = CameraIntrinsics(D.fx * 1.01, D.fy, D.cx, D.cy, D.k1, D.k2, D.width, D.height)
    full = intrinsic_error(star, D)
    assert full == pytest.approx(brute_force_error(star, D), abs=1e-9)
    assert abs(intrinsic_error(star, D, stride=4) - full) < 0.01


def test_scaled_focal_closed_form_without_distortion(pinhole):
    D = pinhole
    star = CameraIntrinsics(D.fx * 1.01, D.fy, D.cx, D.cy, 0.0, 0.0, D.width, D.height)
    expected = np.mean(0.01 * np.abs(np.arange(1, D.width + 1) - D.cx))
    assert intrinsic_error(star, D) == pytest.approx(expected, abs=1e-9)


def test_grid_uses_one_based_pixel_centres():
    g = pixel_grid(3, 2)
    assert g[0].tolist() == [1.0, 1.0] and g[-1].tolist() == [3.0, 2.0] and len(g) == 6


def test_size_mismatch(pinhole):
    with pytest.raises(ValueError):
        intrinsic_error(CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 0, 0, 800, 600), pinhole)


def test_calibration_error_bundle(pinhole):
    T = Se3(axis_angle_quat([0, 0, 1], 0.1), [0.0, 0.0, 0.0])
    e = calibration_error(T, pinhole, T, pinhole)
    assert e == CalibrationError(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        CalibrationError(-1.0, 0.0, 0.0)
