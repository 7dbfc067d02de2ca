import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibnerf.geometry import (
    Camera,
    Intrinsics,
    InvalidPoseError,
    Pose,
    Rays,
    axis_rotation,
    compose_relative_rotation,
    generate_rays,
    project,
    random_rotation,
    sample_depths,
    sample_points,
    validate_rotation,
)


def identity_camera(f=50.0, w=64, h=48):
    return Camera(Pose(np.eye(3), np.zeros(3)), Intrinsics(f, f, (w - 1) / 2, (h - 1) / 2), w, h)


def random_camera(rng):
    rot = random_rotation(rng)
    w, h = int(rng.integers(8, 80)), int(rng.integers(8, 80))
    intr = Intrinsics(rng.uniform(20, 120), rng.uniform(20, 120), rng.uniform(0, w - 1), rng.uniform(0, h - 1))
    return Camera(Pose(rot, rng.normal(size=3)), intr, w, h)


class TestRotationValidation:
    def test_accepts_exact_rotation(self):
        r = axis_rotation("y", 0.3)
        np.testing.assert_array_equal(validate_rotation(r), r)

    def test_repairs_small_roundoff(self):
        r = axis_rotation("x", 1.0) + 2e-5 * np.eye(3)
        fixed = validate_rotation(r)
        np.testing.assert_allclose(fixed.T @ fixed, np.eye(3), atol=1e-12)
        assert np.linalg.det(fixed) == pytest.approx(1.0)

    def test_rejects_shear(self):
        r = np.eye(3)
        r[0, 1] = 0.1
        with pytest.raises(InvalidPoseError):
            Pose(r, np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(InvalidPoseError):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


class TestComposeRelativeRotation:
    def test_same_pose_gives_identity(self):
        p = Pose(random_rotation(np.random.default_rng(0)), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(compose_relative_rotation(p, p), np.eye(3), atol=1e-12)

    def test_same_axis_angles_add(self):
        target = Pose(axis_rotation("x", np.pi / 4), np.zeros(3))
        # reference camera-to-world = Rx(45), so its world-to-camera is Rx(-45)
        reference = Pose(axis_rotation("x", -np.pi / 4), np.zeros(3))
        np.testing.assert_allclose(compose_relative_rotation(target, reference), axis_rotation("x", np.pi / 2),
                                   atol=1e-12)

    def test_random_pairs_are_rotations(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = Pose(random_rotation(rng), rng.normal(size=3))
            b = Pose(random_rotation(rng), rng.normal(size=3))
            r = compose_relative_rotation(a, b)
            np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-6)
            assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-6)

    def test_translation_ignored(self):
        rot = random_rotation(np.random.default_rng(2))
        a = Pose(rot, np.zeros(3))
        b = Pose(rot, np.array([5.0, -1.0, 2.0]))
        np.testing.assert_allclose(compose_relative_rotation(a, b), np.eye(3), atol=1e-12)


class TestGenerateRays:
    def test_principal_point_is_optical_axis(self):
        cam = identity_camera()
        rays = generate_rays(cam, [[cam.intrinsics.cx, cam.intrinsics.cy]])
        np.testing.assert_allclose(rays.directions[0], [0, 0, 1], atol=1e-15)
        np.testing.assert_allclose(rays.origins[0], [0, 0, 0])

    def test_one_focal_length_offset(self):
        cam = identity_camera(f=40.0)
        rays = generate_rays(cam, [[cam.intrinsics.cx + 40.0, cam.intrinsics.cy]])
        np.testing.assert_allclose(rays.directions[0], np.array([1, 0, 1]) / np.sqrt(2), atol=1e-15)

    def test_origin_is_camera_center(self):
        rng = np.random.default_rng(3)
        cam = random_camera(rng)
        rays = generate_rays(cam, cam.pixel_grid()[:5])
        np.testing.assert_allclose(rays.origins, np.tile(cam.pose.center, (5, 1)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_unit_directions(self, seed):
        rng = np.random.default_rng(seed)
        cam = random_camera(rng)
        pix = rng.uniform([0, 0], [cam.width, cam.height], size=(20, 2))
        d = generate_rays(cam, pix).directions
        np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-6)


class TestSampling:
    def test_midpoints(self):
        np.testing.assert_allclose(sample_depths(1.0, 2.0, 4)[0], [1.125, 1.375, 1.625, 1.875])

    def test_single_midpoint(self):
        np.testing.assert_allclose(sample_depths(1.0, 2.0, 1)[0], [1.5])

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            sample_depths(1.0, 2.0, 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 64), st.integers(0, 10_000), st.floats(0.01, 5.0), st.floats(0.01, 10.0))
    def test_stratified_within_bins(self, count, seed, near, span):
        far = near + span
        t = sample_depths(near, far, count, "stratified", seed, n_rays=3)
        edges = np.linspace(near, far, count + 1)
        assert np.all(np.diff(t, axis=-1) > 0)
        assert np.all(t >= edges[:-1]) and np.all(t <= edges[1:])
        np.testing.assert_array_equal(t, sample_depths(near, far, count, "stratified", seed, n_rays=3))

    def test_points_lie_on_rays(self):
        rng = np.random.default_rng(4)
        d = rng.normal(size=(6, 3))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        rays = Rays(rng.normal(size=(6, 3)), d, 0.5, 3.0)
        pos, t = sample_points(rays, 7, "stratified", seed=1)
        np.testing.assert_allclose(pos, rays.origins[:, None] + t[..., None] * d[:, None], atol=1e-12)
        assert np.all((t >= 0.5) & (t <= 3.0))


class TestProject:
    def test_point_on_axis(self):
        cam = identity_camera()
        u, v, depth, valid = project(np.array([0.0, 0.0, 1.0]), cam)
        assert (u, v, depth, valid) == (cam.intrinsics.cx, cam.intrinsics.cy, 1.0, True)

    def test_behind_camera_invalid(self):
        _, _, depth, valid = project(np.array([0.0, 0.0, -1.0]), identity_camera())
        assert depth == -1.0 and not valid

    def test_outside_image_invalid(self):
        cam = identity_camera(f=10.0)
        _, _, _, valid = project(np.array([100.0, 0.0, 1.0]), cam)
        assert not valid

    def test_roundtrip_random(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(1000):
            cam = random_camera(rng)
            pix = rng.uniform([0, 0], [cam.width - 1, cam.height - 1], size=(1, 2))
            rays = generate_rays(cam, pix, 0.1, 20.0)
            t = rng.uniform(0.1, 20.0)
            u, v, depth, valid = project(rays.origins + t * rays.directions, cam)
            worst = max(worst, abs(u[0] - pix[0, 0]), abs(v[0] - pix[0, 1]))
            assert valid[0] and depth[0] > 0
        assert worst < 1e-4
