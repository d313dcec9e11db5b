import numpy as np
import pytest

from rainrig.calibration import Homography, warp_image
from rainrig.droplet_sim import (
    Droplet,
    DropletField,
    SceneGeometry,
    SimulatedRig,
    composite_rainy,
    empty_field,
    lens_scale,
    render_droplet,
    sample_droplet_field,
    simulate_capture,
)
from rainrig.errors import ConfigurationError, SamplingError

from conftest import small_projective_matrix, smooth_image


def _paste(scene, rendered):
    out = scene.astype(np.float32).copy()
    alpha = rendered.alpha if out.ndim == 2 else rendered.alpha[..., None]
    region = out[rendered.y0 : rendered.y1, rendered.x0 : rendered.x1]
    touched = rendered.alpha > 0
    blended = (1.0 - alpha) * region + alpha * rendered.patch
    region[touched] = blended[touched]
    return out


class TestSampling:
    def test_zero_density_gives_empty_field(self):
        field = sample_droplet_field(seed=1, density=0.0, radius_range=(8, 40))
        assert field.droplets == ()
        assert field.coverage() == 0.0

    def test_same_seed_same_field(self):
        a = sample_droplet_field(seed=42, density=0.15, radius_range=(6, 24), plane_size=(320, 240))
        b = sample_droplet_field(seed=42, density=0.15, radius_range=(6, 24), plane_size=(320, 240))
        assert a == b
        c = sample_droplet_field(seed=43, density=0.15, radius_range=(6, 24), plane_size=(320, 240))
        assert a != c

    def test_realized_coverage_close_to_target(self):
        field = sample_droplet_field(seed=7, density=0.2, radius_range=(8, 40), plane_size=(1024, 512))
        assert 0.18 <= field.coverage() <= 0.22

    def test_unreachable_density_raises(self):
        with pytest.raises(SamplingError):
            sample_droplet_field(seed=0, density=0.01, radius_range=(50, 60), plane_size=(64, 64))

    def test_streak_fraction_produces_elongated_droplets(self):
        field = sample_droplet_field(
            seed=3, density=0.25, radius_range=(5, 15), streak_fraction=1.0, plane_size=(400, 300)
        )
        assert all(d.elongation >= 2.0 for d in field.droplets)
        # gravity bias: major axes cluster around vertical
        assert all(50 < d.orientation_deg < 130 for d in field.droplets)

    def test_json_round_trip(self):
        field = sample_droplet_field(seed=9, density=0.1, radius_range=(6, 20), plane_size=(256, 128))
        again = DropletField.from_json(field.to_json())
        assert again == field
        assert again.to_json() == field.to_json()


class TestRenderDroplet:
    def test_flat_film_limit_is_identity(self):
        scene = smooth_image(96, 128, seed=5)
        d = Droplet(center=(60.0, 50.0), radius=18.0, height_ratio=1e-6, blur_sigma=0.0, opacity=0.0)
        out = _paste(scene, render_droplet(scene, d, SceneGeometry()))
        assert np.abs(out - scene).max() < 1.0 / 255.0

    def test_vertical_edge_is_inverted_inside_droplet(self):
        # two-tone scene: dark left half, bright right half
        scene = np.full((120, 160), 0.2, dtype=np.float32)
        scene[:, 80:] = 0.8
        d = Droplet(center=(80.0, 60.0), radius=25.0, height_ratio=0.85, blur_sigma=0.0, opacity=0.0)
        r = render_droplet(scene, d, SceneGeometry())
        assert lens_scale(d.height_ratio) < 0, "test droplet must be in the inverted regime"
        out = _paste(scene, r)
        ys, xs = np.mgrid[0:120, 0:160]
        inside = (xs - 80.0) ** 2 + (ys - 60.0) ** 2 <= (0.8 * 25.0) ** 2
        left = inside & (xs < 78)
        right = inside & (xs > 82)
        assert out[right].mean() < out[left].mean(), "edge must appear flipped inside the lens"
        assert scene[xs > 82].mean() > scene[xs < 78].mean()

    def test_large_source_area_washes_to_gray(self):
        scene = np.full((100, 100), 0.2, dtype=np.float32)
        scene[:, 50:] = 0.8
        # |s| ~ 1.9 at h=0.9 and radius 60 -> source footprint far exceeds the frame
        d = Droplet(center=(50.0, 50.0), radius=60.0, height_ratio=0.9, blur_sigma=0.0, opacity=0.0)
        out = _paste(scene, render_droplet(scene, d, SceneGeometry()))
        gray = scene.mean()
        ys, xs = np.mgrid[0:100, 0:100]
        inside = (xs - 50.0) ** 2 + (ys - 50.0) ** 2 <= 45.0**2
        assert abs(out[inside].mean() - gray) < 10.0 / 255.0

    def test_offscreen_droplet_returns_none(self):
        scene = smooth_image(32, 32, seed=0)
        d = Droplet(center=(500.0, 500.0), radius=10.0)
        assert render_droplet(scene, d, SceneGeometry()) is None


class TestComposite:
    def test_empty_field_is_bit_exact(self):
        scene = smooth_image(64, 64, seed=2)
        out = composite_rainy(scene, empty_field((64, 64)), SceneGeometry())
        assert np.array_equal(out, scene)
        assert out is not scene

    def test_single_droplet_changes_only_masked_pixels(self):
        scene = smooth_image(90, 110, seed=3)
        d = Droplet(center=(55.0, 45.0), radius=16.0, height_ratio=0.8, blur_sigma=1.0, opacity=0.1)
        field = DropletField(droplets=(d,), seed=0, density=0.0, plane_size=(110, 90))
        out = composite_rainy(scene, field, SceneGeometry())
        r = render_droplet(scene, d, SceneGeometry())
        mask = np.zeros((90, 110), dtype=bool)
        mask[r.y0 : r.y1, r.x0 : r.x1] = r.alpha > 0
        assert np.array_equal(out[~mask], scene[~mask])
        assert np.abs(out[mask] - scene[mask]).max() > 1.0 / 255.0

    def test_disjoint_droplets_are_order_independent(self):
        scene = smooth_image(80, 160, seed=4)
        d1 = Droplet(center=(35.0, 40.0), radius=14.0, height_ratio=0.7)
        d2 = Droplet(center=(120.0, 40.0), radius=10.0, height_ratio=0.9, blur_sigma=0.8)
        geom = SceneGeometry()
        f12 = DropletField(droplets=(d1, d2), seed=0, density=0.0, plane_size=(160, 80))
        f21 = DropletField(droplets=(d2, d1), seed=0, density=0.0, plane_size=(160, 80))
        out = composite_rainy(scene, f12, geom)
        assert np.array_equal(out, composite_rainy(scene, f21, geom))
        pasted = _paste(_paste(scene, render_droplet(scene, d1, geom)), render_droplet(scene, d2, geom))
        assert np.array_equal(out, np.clip(pasted, 0, 1))


class TestSimulateCapture:
    def test_clear_capture_is_pure_refraction_shift(self):
        scene = smooth_image(100, 140, seed=6)
        geom = SceneGeometry()
        cap = simulate_capture(scene, "clear", None, geom, noise_sigma=0.0)
        shift = Homography.translation(*geom.refraction_shift())
        expected = warp_image(scene, shift, (140, 100))
        assert np.allclose(cap, expected, atol=1e-6)
        dx, dy = geom.refraction_shift()
        assert dx == 0.0 and 0 < dy < 4

    def test_rain_difference_confined_to_warped_droplet_masks(self):
        scene = smooth_image(120, 160, seed=7)
        geom = SceneGeometry(capture_perturbation=Homography(small_projective_matrix(seed=2, scale=0.3)))
        field = sample_droplet_field(seed=11, density=0.12, radius_range=(6, 18), plane_size=(160, 120))
        clear = simulate_capture(scene, "clear", None, geom)
        rainy = simulate_capture(scene, "rainy", field, geom)
        cam = geom.capture_perturbation.compose(Homography.translation(*geom.refraction_shift()))
        warped_mask = warp_image(field.coverage_mask().astype(np.float32), cam, (160, 120)) > 0
        import cv2

        far_outside = ~(cv2.dilate(warped_mask.astype(np.uint8), np.ones((5, 5), np.uint8)) > 0)
        diff = np.abs(rainy - clear).max(axis=-1) if rainy.ndim == 3 else np.abs(rainy - clear)
        assert diff[far_outside].max() == 0.0
        assert diff[warped_mask].mean() > 1.0 / 255.0

    def test_noise_statistics_match_sigma(self):
        scene = np.full((400, 300), 0.5, dtype=np.float32)
        geom = SceneGeometry()
        sigma = 2.0 / 255.0
        quiet = simulate_capture(scene, "clear", None, geom, noise_sigma=0.0)
        noisy = simulate_capture(scene, "clear", None, geom, noise_sigma=sigma, rng=np.random.default_rng(5))
        resid = (noisy - quiet).ravel()
        assert resid.size >= 1e5
        assert abs(resid.std() - sigma) < 0.2 * sigma

    def test_field_resolution_mismatch_rejected(self):
        scene = smooth_image(64, 64, seed=1)
        field = sample_droplet_field(seed=1, density=0.1, radius_range=(4, 10), plane_size=(32, 32))
        with pytest.raises(ConfigurationError):
            simulate_capture(scene, "rainy", field, SceneGeometry())


class TestInvariants:
    def test_pair_alignment_outside_masks(self):
        scene = smooth_image(100, 130, seed=9)
        geom = SceneGeometry(capture_perturbation=Homography(small_projective_matrix(seed=5, scale=0.3)))
        field = sample_droplet_field(seed=21, density=0.15, radius_range=(5, 16), plane_size=(130, 100))
        clear = simulate_capture(scene, "clear", None, geom)
        rainy = simulate_capture(scene, "rainy", field, geom)
        cam = geom.capture_perturbation.compose(Homography.translation(*geom.refraction_shift()))
        warped_mask = warp_image(field.coverage_mask().astype(np.float32), cam, (130, 100)) > 0
        diff = np.abs(rainy - clear)
        if diff.ndim == 3:
            diff = diff.mean(axis=-1)
        assert diff[~warped_mask].mean() < 1.0 / 255.0

    def test_magnification_exceeds_one_for_all_heights(self):
        for h in np.linspace(1e-4, 1.0, 200):
            k = abs(lens_scale(float(h)))
            assert k * k > 1.0, f"k^2 <= 1 at height_ratio {h}"

    def test_capture_determinism(self):
        scene = smooth_image(80, 100, seed=10)
        geom = SceneGeometry()
        field = sample_droplet_field(seed=33, density=0.1, radius_range=(5, 14), plane_size=(100, 80))
        a = simulate_capture(scene, "rainy", field, geom, noise_sigma=0.01, rng=99)
        b = simulate_capture(scene, "rainy", field, geom, noise_sigma=0.01, rng=99)
        assert np.array_equal(a, b)

    def test_values_stay_in_range(self):
        scene = smooth_image(90, 90, seed=11)
        field = sample_droplet_field(seed=13, density=0.3, radius_range=(4, 30), plane_size=(90, 90))
        out = composite_rainy(scene, field, SceneGeometry())
        assert out.min() >= 0.0 and out.max() <= 1.0
        cap = simulate_capture(scene, "rainy", field, SceneGeometry(), noise_sigma=0.05, rng=1)
        assert cap.min() >= 0.0 and cap.max() <= 1.0

    def test_coverage_within_ten_percent_for_density_sweep(self):
        for density in (0.05, 0.1, 0.2, 0.3, 0.4):
            field = sample_droplet_field(seed=17, density=density, radius_range=(6, 24), plane_size=(512, 256))
            realized = field.coverage()
            assert abs(realized - density) <= 0.1 * density


class TestSimulatedRig:
    def test_pressure_proportional_spawning(self):
        rig = SimulatedRig(monitor_size=(128, 96), droplet_seed=4, max_density=0.2)
        scene = smooth_image(96, 128, seed=12)
        rig.show(scene)
        rig.set_pressure(0.0)
        clear = rig.trigger()
        rig.set_pressure(1.0)
        rainy = rig.trigger()
        assert not np.array_equal(clear, rainy)
        assert rig.fields_used[-1].density == pytest.approx(0.2)

    def test_rig_is_reproducible_after_reset(self):
        rig = SimulatedRig(monitor_size=(64, 64), droplet_seed=8, max_density=0.15, noise_sigma=0.01)
        scene = smooth_image(64, 64, seed=13)
        frames_a = []
        rig.show(scene)
        rig.set_pressure(0.7)
        frames_a = [rig.trigger() for _ in range(3)]
        rig.reset()
        rig.show(scene)
        rig.set_pressure(0.7)
        frames_b = [rig.trigger() for _ in range(3)]
        for a, b in zip(frames_a, frames_b):
            assert np.array_equal(a, b)

    def test_oversized_source_rejected(self):
        rig = SimulatedRig(monitor_size=(32, 32))
        with pytest.raises(ConfigurationError):
            rig.show(np.zeros((64, 64), dtype=np.float32))
