import numpy as np
import pytest

from tokensplat.cameras import (Camera, identity_camera, look_at_camera,
                                normalize_coords, plucker_rays, project)


def _random_camera(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    return Camera(rot, rng.normal(size=3), 24.0, 24.0, 8.0, 8.0, 16, 16)


def test_rotation_must_be_orthonormal():
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(np.eye(3) * 2.0, np.zeros(3), 1.0, 1.0, 0.5, 0.5, 1, 1)


def test_plucker_identity_principal_pixel():
    # 2x2 image, cx=cy=1: pixel (0,0) center is exactly the principal point... use 1x1
    cam = identity_camera(1, 1, focal=1.0)  # cx=cy=0.5, pixel center (0.5, 0.5)
    pm = plucker_rays(cam)
    assert np.allclose(pm[0, 0, :3], [0, 0, 1])
    assert np.allclose(pm[0, 0, 3:], [0, 0, 0])


def test_plucker_translated_camera_moment():
    cam = identity_camera(1, 1, focal=1.0)
    cam.translation = np.array([1.0, 0.0, 0.0])
    pm = plucker_rays(cam)
    assert np.allclose(pm[0, 0, :3], [0, 0, 1])
    assert np.allclose(pm[0, 0, 3:], [0, -1, 0])  # (1,0,0) x (0,0,1)


@pytest.mark.parametrize("seed", range(5))
def test_plucker_invariants_random_cameras(seed):
    pm = plucker_rays(_random_camera(seed))
    d, m = pm[..., :3], pm[..., 3:]
    assert np.allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-6)
    assert np.abs(np.sum(d * m, axis=-1)).max() <= 1e-6


def test_project_principal_axis():
    cam = identity_camera(32, 32, focal=32.0)
    u, v, z, behind = project(np.array([[0.0, 0.0, 1.0]]), cam)
    assert (u[0], v[0], z[0]) == (16.0, 16.0, 1.0)
    assert not behind[0]


def test_project_pinhole_formula():
    cam = identity_camera(32, 32, focal=32.0)
    u, _, _, _ = project(np.array([[0.5, 0.0, 1.0]]), cam)
    assert u[0] == pytest.approx(32.0)


def test_project_behind_camera_flag():
    cam = identity_camera(32, 32)
    _, _, _, behind = project(np.array([[0.0, 0.0, -1.0]]), cam)
    assert behind[0]


def test_normalize_coords_examples():
    w, h = 64, 48
    assert normalize_coords(w / 2, h / 2, w, h) == (0.0, 0.0)
    assert normalize_coords(0.0, 0.0, w, h) == (-1.0, -1.0)
    un, vn = normalize_coords(float(w), float(h), w, h)
    assert (un, vn) == (1.0, 1.0)
    un, _ = normalize_coords(1.25 * w, 0.0, w, h)
    assert un == pytest.approx(1.5)


def test_frustum_points_normalize_in_bounds():
    cam = _random_camera(3)
    rng = np.random.default_rng(0)
    # points constructed inside the frustum: pick pixels, unproject at random depth
    px = rng.uniform(0, cam.width, size=50)
    py = rng.uniform(0, cam.height, size=50)
    z = rng.uniform(0.5, 5.0, size=50)
    p_cam = np.stack([(px - cam.cx) / cam.fx * z, (py - cam.cy) / cam.fy * z, z], axis=1)
    world = p_cam @ cam.rotation.T + cam.translation
    u, v, _, behind = project(world, cam)
    assert not behind.any()
    un, vn = normalize_coords(u, v, cam.width, cam.height)
    assert (np.abs(un) <= 1.0 + 1e-9).all() and (np.abs(vn) <= 1.0 + 1e-9).all()


def test_look_at_camera_sees_target_at_center():
    cam = look_at_camera((1.0, -0.5, -0.3), (0.0, 0.0, 1.0), 32, 32)
    u, v, z, behind = project(np.array([[0.0, 0.0, 1.0]]), cam)
    assert not behind[0] and z[0] > 0
    assert u[0] == pytest.approx(cam.cx) and v[0] == pytest.approx(cam.cy)


def test_camera_dict_roundtrip():
    cam = _random_camera(9)
    cam2 = Camera.from_dict(cam.to_dict())
    assert np.array_equal(cam.rotation, cam2.rotation)
    assert np.array_equal(cam.translation, cam2.translation)
    assert cam.to_dict() == cam2.to_dict()
