import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splatlab.core import (
    FLAT2D,
    PERSPECTIVE3D,
    ContractViolation,
    DegenerateCovarianceError,
    Gaussian2DFlat,
    Gaussian3D,
    InvalidParameterError,
    SceneModel,
    activate,
    activate_opacity,
    covariance_from,
    kernel_eval,
    logit,
    quaternion_to_rotation,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 1e-3)
scales3 = arrays(np.float64, 3, elements=st.floats(1e-3, 1e2))


def test_identity_quaternion_unit_scale():
    np.testing.assert_allclose(covariance_from([1, 0, 0, 0], [1, 1, 1]), np.eye(3), atol=1e-15)


def test_axis_aligned_scale_squares():
    np.testing.assert_allclose(covariance_from([1, 0, 0, 0], [2, 1, 1]), np.diag([4, 1, 1]), atol=1e-15)


def test_quarter_turn_about_z_swaps_axes():
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    np.testing.assert_allclose(covariance_from(q, [2, 1, 1]), np.diag([1, 4, 1]), atol=1e-12)


def test_flat_covariance_from_angle():
    np.testing.assert_allclose(covariance_from(np.pi / 2, [3, 1]), np.diag([1, 9]), atol=1e-12)


def test_zero_quaternion_rejected():
    with pytest.raises(InvalidParameterError):
        covariance_from([0, 0, 0, 0], [1, 1, 1])


def test_nonpositive_scale_rejected():
    with pytest.raises(InvalidParameterError):
        covariance_from([1, 0, 0, 0], [1, 0, 1])


@given(quats, scales3)
def test_covariance_symmetric_psd(q, s):
    cov = covariance_from(q, s)
    assert np.array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-9 * s.max() ** 2


@given(quats)
def test_rotation_is_orthonormal(q):
    r = quaternion_to_rotation(q)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(r) - 1) < 1e-12


def test_kernel_peak_is_one():
    assert kernel_eval([1.0, 2.0], [[3.0, 0.5], [0.5, 1.0]], [1.0, 2.0]) == 1.0


def test_kernel_identity_cov():
    assert kernel_eval([0, 0], np.eye(2), [1, 1]) == pytest.approx(np.exp(-1.0), abs=1e-7)


def test_kernel_anisotropic_cov():
    assert kernel_eval([0, 0], np.diag([4.0, 1.0]), [2, 0]) == pytest.approx(np.exp(-0.5), abs=1e-7)


def test_kernel_singular_cov_raises():
    with pytest.raises(DegenerateCovarianceError):
        kernel_eval([0, 0], [[1.0, 1.0], [1.0, 1.0]], [1, 0], eps=0.0)


@settings(max_examples=50)
@given(st.floats(0, 2 * np.pi), arrays(np.float64, 2, elements=st.floats(0.1, 10)),
       arrays(np.float64, 2, elements=st.floats(-5, 5)))
def test_kernel_rotation_invariant(theta, s, d):
    c, sn = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -sn], [sn, c]])
    cov = covariance_from(0.3, s)
    a = kernel_eval([0, 0], cov, d)
    b = kernel_eval([0, 0], rot @ cov @ rot.T, rot @ d)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-300)


def test_activation_midpoints():
    class Raw:
        rotation = np.array([[2.0, 0, 0, 0]])
        log_scale = np.zeros((1, 3))
        logit_opacity = np.zeros(1)

    act = activate(Raw)
    assert act.opacity[0] == 0.5
    np.testing.assert_array_equal(act.scale, np.ones((1, 3)))
    np.testing.assert_array_equal(act.rotation, [[1.0, 0, 0, 0]])


def test_opacity_saturates_below_one():
    o = activate_opacity(np.array([15.0, 40.0]))
    assert np.all(o < 1.0)
    assert o[0] == o[1]
    assert 1.0 - o[0] < 1e-6


@given(st.floats(-14.9, 14.9), st.floats(-14.9, 14.9))
def test_opacity_monotone_and_invertible(a, b):
    oa, ob = activate_opacity(a), activate_opacity(b)
    if a < b:
        assert oa <= ob
    assert float(logit(oa)) == pytest.approx(a, abs=1e-7)


def test_scene_from_gaussians_roundtrip():
    gs = [Gaussian3D(np.array([0.0, 1, 2]), np.array([1.0, 0, 0, 0]), np.zeros(3), 0.3, np.ones(3) * 0.2)]
    scene = SceneModel.from_gaussians(gs)
    assert scene.mode == PERSPECTIVE3D and scene.n == 1
    back = scene.gaussian(0)
    np.testing.assert_array_equal(back.position, gs[0].position)
    flat = SceneModel.from_gaussians([Gaussian2DFlat(np.zeros(2), 0.1, np.zeros(2), 2.0, 0.0, np.zeros(3))])
    assert flat.mode == FLAT2D and flat.depth[0] == 2.0


def test_scene_row_ops_bump_generation(rng):
    from conftest import random_flat_scene

    scene = random_flat_scene(rng, 5, 16, 16)
    g0 = scene.generation
    scene.append_rows(scene.rows(slice(0, 2)))
    assert scene.n == 7 and scene.generation == g0 + 1
    scene.keep_rows(np.arange(7) % 2 == 0)
    assert scene.n == 4 and scene.generation == g0 + 2
    with pytest.raises(ContractViolation):
        scene.keep_rows(np.ones(3, bool))


def test_negative_flat_depth_rejected():
    with pytest.raises(InvalidParameterError):
        SceneModel(FLAT2D, np.zeros((1, 2)), np.zeros((1, 1)), np.zeros((1, 2)), np.zeros(1),
                   np.zeros((1, 3)), depth=[-1.0])
