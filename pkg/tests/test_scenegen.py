import math

import numpy as np
import pytest

from unshadow.envlight import sky_envmap
from unshadow.scenegen import (
    SceneGenConfig,
    SceneGenError,
    TextureSpec,
    build_envmap,
    central_height_cap,
    derive_seed,
    generate_scene,
    generate_texture,
    object_mesh,
    sample_camera,
    sample_lighting,
    sample_sky,
    scene_from_json,
    scene_to_json,
    texture_image,
)

CFG = SceneGenConfig()


class TestDeterminism:
    def test_same_seed_identical_serialization(self):
        a = scene_to_json(generate_scene(1234, CFG))
        b = scene_to_json(generate_scene(1234, CFG))
        assert a == b

    def test_different_seeds_differ(self):
        a = scene_to_json(generate_scene(1, CFG))
        b = scene_to_json(generate_scene(2, CFG))
        assert a != b

    def test_json_round_trip(self):
        spec = generate_scene(77, CFG)
        back = scene_from_json(scene_to_json(spec))
        assert scene_to_json(back) == scene_to_json(spec)

    def test_derive_seed_stable(self):
        assert derive_seed(42, 3) == derive_seed(42, 3)
        assert derive_seed(42, 3) != derive_seed(42, 4)


class TestPlacement:
    def test_object_count_and_central_origin(self):
        for seed in range(12):
            spec = generate_scene(seed, CFG)
            assert len(spec.objects) in (6, 7)
            assert spec.objects[0].position == (0.0, 0.0)

    def test_boxes_disjoint_oracle(self):
        # Brute-force O(n^2) overlap check on the rendered footprints.
        for seed in range(60):
            spec = generate_scene(seed, CFG)
            boxes = []
            for obj in spec.objects:
                lo, hi = object_mesh(obj).aabb()
                boxes.append((lo[0], hi[0], lo[2], hi[2]))
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    a, b = boxes[i], boxes[j]
                    overlap_x = min(a[1], b[1]) - max(a[0], b[0])
                    overlap_z = min(a[3], b[3]) - max(a[2], b[2])
                    assert overlap_x <= 1e-12 or overlap_z <= 1e-12, (seed, i, j)

    def test_lowest_vertex_exactly_on_plane(self):
        for seed in range(12):
            spec = generate_scene(seed, CFG)
            for obj in spec.objects:
                assert object_mesh(obj).vertices[:, 1].min() == 0.0

    def test_footprints_inside_plane(self):
        for seed in range(12):
            spec = generate_scene(seed, CFG)
            lim = spec.plane.half_extent
            for obj in spec.objects:
                lo, hi = object_mesh(obj).aabb()
                assert lo[0] >= -lim and hi[0] <= lim
                assert lo[2] >= -lim and hi[2] <= lim

    def test_central_height_capped(self):
        for seed in range(12):
            spec = generate_scene(seed, CFG)
            offset = np.asarray(spec.camera.eye) - np.asarray(spec.camera.look_at)
            elev = math.asin(offset[1] / np.linalg.norm(offset))
            cap = central_height_cap(CFG, elev)
            height = object_mesh(spec.objects[0]).aabb()[1][1]
            assert height <= cap + 1e-9

    def test_removed_region_reveals_plane(self):
        # every pixel of the central object must uncover ground texture:
        # rays past its top silhouette still land inside the plane quad
        from unshadow.render import RenderConfig, render_depth, render_radiance

        rc = RenderConfig(shadow_samples=4)
        for seed in (3, 9):
            spec = generate_scene(seed, CFG)
            d = render_depth(spec, "full").data[:, :, 0]
            dr = render_depth(spec, "removed").data[:, :, 0]
            tex = render_radiance(spec, "texture-only", rc).data
            obj = dr > d
            assert obj.any()
            assert (tex[obj] > 0).all(), f"seed {seed}: texture hole behind object"


class TestCamera:
    def test_zero_jitter_on_hemisphere(self):
        cfg = SceneGenConfig(pos_jitter=0.0)
        rng = np.random.default_rng(0)
        radius = cfg.hemisphere_radius_factor * cfg.plane_half_extent
        for _ in range(50):
            cam = sample_camera(rng, cfg)
            assert np.linalg.norm(cam.eye) == pytest.approx(radius, rel=1e-12)
            assert cam.look_at == (0.0, 0.0, 0.0)

    def test_elevation_within_bounds(self):
        cfg = SceneGenConfig(pos_jitter=0.0)
        rng = np.random.default_rng(1)
        elevations = []
        for _ in range(10000):
            cam = sample_camera(rng, cfg)
            eye = np.asarray(cam.eye)
            elevations.append(math.asin(eye[1] / np.linalg.norm(eye)))
        assert min(elevations) >= cfg.elevation[0] - 1e-9
        assert max(elevations) <= cfg.elevation[1] + 1e-9

    def test_azimuth_uniform_chi_square(self):
        cfg = SceneGenConfig(pos_jitter=0.0)
        rng = np.random.default_rng(2)
        n, bins = 10000, 16
        counts = np.zeros(bins)
        for _ in range(n):
            cam = sample_camera(rng, cfg)
            az = math.atan2(cam.eye[2], cam.eye[0]) % (2 * math.pi)
            counts[int(az / (2 * math.pi) * bins)] += 1
        expected = n / bins
        chi2 = ((counts - expected) ** 2 / expected).sum()
        # 15 dof: mean 15, sigma sqrt(30); 3-sigma bound
        assert chi2 < 15 + 3 * math.sqrt(30)

    def test_jitter_moves_eye_but_keeps_direction(self):
        cfg = SceneGenConfig(pos_jitter=0.1)
        rng = np.random.default_rng(3)
        radius = cfg.hemisphere_radius_factor * cfg.plane_half_extent
        for _ in range(20):
            cam = sample_camera(rng, cfg)
            assert np.asarray(cam.look_at).any()  # target moved with the eye
            offset = np.asarray(cam.eye) - np.asarray(cam.look_at)
            assert np.linalg.norm(offset) == pytest.approx(radius, rel=1e-9)


class TestLighting:
    def test_zero_peak_gives_zero_intensity(self):
        rng = np.random.default_rng(0)
        _, point = sample_lighting(rng, CFG, np.zeros(3))
        assert point.intensity == (0.0, 0.0, 0.0)

    def test_light_above_plane_and_distance_bounds(self):
        rng = np.random.default_rng(1)
        lo = CFG.light_distance[0] * CFG.plane_half_extent
        hi = CFG.light_distance[1] * CFG.plane_half_extent
        for _ in range(10000):
            _, point = sample_lighting(rng, CFG, np.ones(3))
            pos = np.asarray(point.position)
            assert pos[1] > 0
            assert lo - 1e-9 <= np.linalg.norm(pos) <= hi + 1e-9

    def test_intensity_bounded_by_peak(self):
        rng = np.random.default_rng(2)
        peak = np.array([2.0, 0.5, 1.0])
        for _ in range(1000):
            _, point = sample_lighting(rng, CFG, peak)
            assert all(0.0 <= v <= p for v, p in zip(point.intensity, peak))

    def test_sky_envmap_shape_and_positivity(self):
        rng = np.random.default_rng(3)
        env = sky_envmap(sample_sky(rng), height=32)
        assert env.image.width == 64 and env.image.height == 32
        assert env.image.data.min() >= 0.0
        assert env.peak().shape == (3,)

    def test_generated_point_light_bounded_by_envmap_peak(self):
        for seed in range(8):
            spec = generate_scene(seed, CFG)
            env = build_envmap(spec.lighting, height=CFG.envmap_height)
            peak = env.peak()
            assert all(v <= p + 1e-6 for v, p in zip(spec.lighting.point_light.intensity, peak))


class TestTextures:
    def test_flat_constant(self):
        img = texture_image(TextureSpec(family="flat", colors=((0.5, 0.5, 0.5), (0, 0, 0))), 32)
        assert np.all(img.data == 0.5)

    def test_checker_two_values(self):
        img = texture_image(
            TextureSpec(family="checker", colors=((0.2, 0.2, 0.2), (0.9, 0.9, 0.9)), cells=4), 32)
        assert len(np.unique(img.data)) == 2

    def test_all_families_positive(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            img = generate_texture(rng, CFG)
            assert img.data.min() > 0.0
            assert img.data.max() <= 1.0

    def test_requires_sky_or_envmap(self):
        cfg = SceneGenConfig(procedural_sky=False)
        with pytest.raises(SceneGenError):
            generate_scene(0, cfg)
