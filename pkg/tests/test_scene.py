import json

import numpy as np
import pytest

from calibnerf.geometry import Camera, Intrinsics, Pose
from calibnerf.scene import (
    AnalyticScene,
    SceneBundle,
    SceneFormatError,
    Sphere,
    SyntheticSceneSpec,
    generate_synthetic_scene,
    load_scene,
    quantize,
    read_ppm,
    render_view,
    save_scene,
    select_reference_views,
    trace,
    view_scores,
    write_ppm,
)

BG = np.array([0.1, 0.2, 0.3])
RED = np.array([0.9, 0.2, 0.1])
BLUE = np.array([0.1, 0.3, 0.8])
GROUND = np.array([0.5, 0.6, 0.7])
S2 = np.sqrt(0.5)


def one_ray(scene, origin, direction):
    d = np.asarray(direction, dtype=float)
    return trace(scene, np.array([origin], dtype=float), (d / np.linalg.norm(d))[None])[0]


def sphere_scene(light, spheres=None):
    spheres = spheres if spheres is not None else [Sphere(np.array([0.0, 0.0, 5.0]), 1.0, RED)]
    return AnalyticScene(spheres=spheres, background=BG, light=light)


def ground_scene(light):
    return AnalyticScene(ground_plane=True, ground_extent=1.5, ground_albedo=GROUND, background=BG, light=light)


# Hand-solved cases: (scene, origin, direction, expected colour)
TRACE_CASES = {
    "head_on_lit": (sphere_scene([0, 0, -1]), [0, 0, 0], [0, 0, 1], RED),
    "head_on_backlit": (sphere_scene([0, 0, 1]), [0, 0, 0], [0, 0, 1], np.zeros(3)),
    "head_on_45deg_light": (sphere_scene([0, 1, -1]), [0, 0, 0], [0, 0, 1], RED * S2),
    "miss": (sphere_scene([0, 0, -1]), [0, 0, 0], [1, 0, 0], BG),
    # ray x=0.6 hits at z=4.2 with normal (0.6, 0, -0.8)
    "off_axis_grazing_light": (sphere_scene([1, 0, 0]), [0.6, 0, 0], [0, 0, 1], RED * 0.6),
    "nearer_sphere_wins": (
        sphere_scene([0, 0, -1], [Sphere(np.array([0.0, 0, 5]), 1.0, RED), Sphere(np.array([0.0, 0, 3]), 0.5, BLUE)]),
        [0, 0, 0], [0, 0, 1], BLUE,
    ),
    # starting at the centre the exit hit is used and the normal flipped toward the ray
    "inside_sphere": (sphere_scene([0, 0, -1]), [0, 0, 5], [0, 0, 1], RED),
    "ground_from_above": (ground_scene([0, 0, 1]), [0, 0, 2], [0, 0, -1], GROUND),
    "ground_from_below_unlit": (ground_scene([0, 0, 1]), [0, 0, -2], [0, 0, 1], np.zeros(3)),
    "ground_outside_extent": (ground_scene([0, 0, 1]), [5, 0, 2], [0, 0, -1], BG),
    "ground_oblique": (ground_scene([1, 0, 1]), [0, 0, 1], [1, 0, -1], GROUND * S2),
}


class TestTraceOracle:
    @pytest.mark.parametrize("case", sorted(TRACE_CASES))
    def test_hand_solved(self, case):
        scene, o, d, expected = TRACE_CASES[case]
        np.testing.assert_allclose(one_ray(scene, o, d), expected, atol=1e-9, rtol=0)

    def test_batched_equals_single(self):
        scene = sphere_scene([0.3, -0.2, -1])
        rng = np.random.default_rng(0)
        d = rng.normal(size=(50, 3)) * [0.2, 0.2, 1] + [0, 0, 1]
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.zeros((50, 3))
        batch = trace(scene, o, d)
        for i in range(50):
            np.testing.assert_array_equal(batch[i], trace(scene, o[i : i + 1], d[i : i + 1])[0])


class TestSyntheticScene:
    def test_rerender_bit_exact(self):
        bundle, analytic = generate_synthetic_scene(SyntheticSceneSpec(seed=3), 24, 20)
        for cam, img in zip(bundle.cameras, bundle.images):
            np.testing.assert_array_equal(render_view(analytic, cam), img)

    def test_deterministic(self):
        a, _ = generate_synthetic_scene(SyntheticSceneSpec(seed=11), 16, 16)
        b, _ = generate_synthetic_scene(SyntheticSceneSpec(seed=11), 16, 16)
        c, _ = generate_synthetic_scene(SyntheticSceneSpec(seed=12), 16, 16)
        for x, y in zip(a.images, b.images):
            np.testing.assert_array_equal(x, y)
        assert not all(np.array_equal(x, y) for x, y in zip(a.images, c.images))

    def test_cameras_see_the_scene(self):
        bundle, _ = generate_synthetic_scene(SyntheticSceneSpec(seed=5), 32, 32)
        bg = np.asarray(SyntheticSceneSpec().background_color)
        for img in bundle.images:
            center = img[12:20, 12:20].reshape(-1, 3)
            assert np.any(np.abs(center - quantize(bg)).max(-1) > 1e-6)

    def test_near_far_bracket_content(self):
        bundle, analytic = generate_synthetic_scene(SyntheticSceneSpec(seed=2), 8, 8)
        r = analytic.bounding_radius()
        for cam in bundle.cameras:
            dist = np.linalg.norm(cam.pose.center)
            assert bundle.near <= max(dist - r, 0.05) + 1e-9
            assert bundle.far >= dist + r - 1e-9

    def test_view_count_and_shape(self):
        bundle, _ = generate_synthetic_scene(SyntheticSceneSpec(camera_count=5), 12, 10)
        assert len(bundle) == 5
        assert bundle.images[0].shape == (10, 12, 3)


class TestSceneIO:
    def test_ppm_roundtrip(self, tmp_path):
        img = quantize(np.random.default_rng(0).uniform(size=(7, 5, 3)))
        write_ppm(tmp_path / "x.ppm", img)
        np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), img)

    def test_scene_roundtrip(self, tmp_path):
        bundle, _ = generate_synthetic_scene(SyntheticSceneSpec(seed=1), 10, 9, name="abc")
        save_scene(bundle, tmp_path / "s")
        back = load_scene(tmp_path / "s")
        assert back.name == "abc" and back.near == bundle.near and back.far == bundle.far
        for a, b in zip(bundle.images, back.images):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(bundle.cameras, back.cameras):
            np.testing.assert_allclose(a.pose.rotation, b.pose.rotation, atol=1e-12)
            np.testing.assert_array_equal(a.pose.translation, b.pose.translation)
            assert a.intrinsics == b.intrinsics

    def _saved(self, tmp_path):
        bundle, _ = generate_synthetic_scene(SyntheticSceneSpec(seed=1, camera_count=3), 6, 6)
        save_scene(bundle, tmp_path)
        return json.loads((tmp_path / "scene.json").read_text())

    @pytest.mark.parametrize(
        "mutate, field",
        [
            (lambda m: m["views"][1].pop("fx"), "fx"),
            (lambda m: m["views"][0].__setitem__("rotation", [1, 0, 0, 0, 1, 0]), "rotation"),
            (lambda m: m["views"][2].__setitem__("rotation", [1, 0.2, 0, 0, 1, 0, 0, 0, 1]), "rotation"),
            (lambda m: m["views"][0].__setitem__("translation", [0, 0]), "translation"),
            (lambda m: m["views"][0].__setitem__("image", "nope.ppm"), "image"),
            (lambda m: m["views"][0].__setitem__("width", 7), "image"),
            (lambda m: m.__setitem__("far", 0.01), "near/far"),
            (lambda m: m.pop("views"), "views"),
        ],
    )
    def test_format_errors_name_field(self, tmp_path, mutate, field):
        manifest = self._saved(tmp_path)
        mutate(manifest)
        (tmp_path / "scene.json").write_text(json.dumps(manifest))
        with pytest.raises(SceneFormatError, match=field):
            load_scene(tmp_path)

    def test_bad_ppm_header(self, tmp_path):
        self._saved(tmp_path)
        (tmp_path / "view_000.ppm").write_bytes(b"P3\n6 6\n255\n")
        with pytest.raises(SceneFormatError):
            load_scene(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(SceneFormatError):
            load_scene(tmp_path)

    def test_bundle_validation(self):
        cam = Camera(Pose(np.eye(3), np.zeros(3)), Intrinsics(1, 1, 1, 1), 4, 4)
        with pytest.raises(ValueError):
            SceneBundle([np.zeros((4, 4, 3))], [cam, cam], 1.0, 2.0)
        with pytest.raises(ValueError):
            SceneBundle([np.zeros((4, 4, 3))], [cam], 2.0, 1.0)


class TestViewSelection:
    def ring(self, n=8, radius=4.0):
        intr = Intrinsics(10, 10, 3.5, 3.5)
        cams = []
        for k in range(n):
            a = 2 * np.pi * k / n
            eye = radius * np.array([np.cos(a), np.sin(a), 0.5])
            cams.append(Camera(Pose.look_at(eye, np.zeros(3)), intr, 8, 8))
        return cams

    def test_nearest_neighbours_on_ring(self):
        cams = self.ring()
        picked = select_reference_views(cams[0], cams, 3)
        assert picked[:2] in ([1, 7], [7, 1])
        assert picked[2] in (2, 6)

    def test_excludes_identical_by_default(self):
        cams = self.ring()
        assert 0 not in select_reference_views(cams[0], cams, 7)
        assert select_reference_views(cams[0], cams, 1, exclude_identical=False) == [0]

    def test_ties_broken_by_index(self):
        cams = self.ring()
        assert select_reference_views(cams[0], cams, 2) == [1, 7]

    def test_scores_symmetric_on_ring(self):
        cams = self.ring()
        s = view_scores(cams[0], cams)
        # arccos near 1 loses half the digits, so the self-score is only ~1e-8
        assert s[0] == pytest.approx(0.0, abs=1e-7)
        assert s[1] == pytest.approx(s[7], abs=1e-7)
        assert s[1] < s[2] < s[3] < s[4]

    def test_too_many_requested(self):
        cams = self.ring(3)
        with pytest.raises(ValueError):
            select_reference_views(cams[0], cams, 3)
