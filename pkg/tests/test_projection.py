import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_3d_scene, random_flat_scene
from splatlab.core import FLAT2D, PERSPECTIVE3D, ContractViolation, SceneModel
from splatlab.projection import Camera, cull_and_project
from splatlab.raster import render

CAM = Camera.look_at([0, 0, 4], [0, 0, 0], [0, 1, 0], 40, 32, 32)


def single(position, scale, mode=PERSPECTIVE3D):
    return SceneModel(mode, [position], [[1.0, 0, 0, 0]], np.log([[scale] * 3]), [0.0], [[0.5] * 3])


def test_on_axis_covariance_closed_form():
    focal, sigma, d = 50.0, 0.2, 5.0
    cam = Camera(np.eye(4), (focal, focal), (16, 16), 32, 32)
    splats = cull_and_project(single([0, 0, -d], sigma), cam, dilation=0.0)
    np.testing.assert_allclose(splats.cov2d[0], (focal * sigma / d) ** 2 * np.eye(2), rtol=1e-12)
    np.testing.assert_allclose(splats.mean2d[0], [16, 16], atol=1e-12)
    assert splats.depth[0] == pytest.approx(d)


def test_behind_near_plane_dropped():
    cam = Camera(np.eye(4), (50, 50), (16, 16), 32, 32, near_plane=0.5)
    scene = SceneModel(PERSPECTIVE3D, [[0, 0, -0.3], [0, 0, -2.0], [0, 0, 1.0]], [[1.0, 0, 0, 0]] * 3,
                       np.log(np.full((3, 3), 0.1)), np.zeros(3), np.zeros((3, 3)))
    splats = cull_and_project(scene, cam)
    np.testing.assert_array_equal(splats.source_index, [1])


def test_flat_mode_is_verbatim(rng):
    scene = random_flat_scene(rng, 12, 32, 32)
    splats = cull_and_project(scene, Camera.flat(32, 32), cull=False)
    np.testing.assert_array_equal(splats.mean2d, scene.position)
    np.testing.assert_array_equal(splats.depth, scene.depth)
    np.testing.assert_array_equal(splats.color, scene.color)
    np.testing.assert_allclose(splats.cov2d, scene.covariances(), rtol=0, atol=1e-12)


def test_flat_camera_translates_canvas(rng):
    scene = random_flat_scene(rng, 6, 32, 32)
    splats = cull_and_project(scene, Camera.flat(32, 32, center=(40, 10)), cull=False)
    np.testing.assert_allclose(splats.mean2d, scene.position - [40, 10] + [16, 16])


def test_nonrigid_camera_rejected():
    w2c = np.eye(4)
    w2c[0, 0] = 2.0
    with pytest.raises(ContractViolation):
        Camera(w2c, (1, 1), (0, 0), 4, 4).validate()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projected_covariance_spd(seed):
    rng = np.random.default_rng(seed)
    splats = cull_and_project(random_3d_scene(rng, 20), CAM, cull=False)
    eig = np.linalg.eigvalsh(splats.cov2d[splats.depth > CAM.near_plane])
    assert np.all(eig > 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_culling_is_conservative(seed):
    rng = np.random.default_rng(seed)
    if seed % 2:
        scene, cam = random_flat_scene(rng, 30, 32, 24, margin=20), Camera.flat(32, 24)
    else:
        scene, cam = random_3d_scene(rng, 30, spread=1.5), Camera.look_at([0, 0, 4], [0, 0, 0], [0, 1, 0],
                                                                           40, 32, 24)
    a, _ = render(cull_and_project(scene, cam, cull=True), 32, 24)
    b, _ = render(cull_and_project(scene, cam, cull=False), 32, 24)
    np.testing.assert_array_equal(a.image, b.image)


def test_vanishing_scale_converges_to_point_projection():
    p = np.array([0.3, -0.2, -1.0])
    cam = Camera.look_at([0.5, 0.4, 3.0], [0, 0, 0], [0, 1, 0], 60, 64, 48)
    t = cam.rotation @ p + cam.translation
    expected = [cam.principal_point[0] - 60 * t[0] / t[2], cam.principal_point[1] + 60 * t[1] / t[2]]
    for s in (1e-2, 1e-4, 1e-8):
        splats = cull_and_project(single(p, s), cam, cull=False)
        np.testing.assert_allclose(splats.mean2d[0], expected, atol=1e-6)
