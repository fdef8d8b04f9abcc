"""Sampling distributions, compositing vs direct scalar evaluation of the
volume-rendering sums, ray generation vs a pinhole projection table, and the
two-pass renderer's contracts."""

import numpy as np
import pytest
from scipy.stats import chisquare

from nerfblocks import autodiff as ad
from nerfblocks.autodiff import Tensor
from nerfblocks.encoding import InvalidInputError, frustum_to_gaussian, integrated_positional_encode, positional_encode
from nerfblocks.nets import ConfigurationError, color_forward, density_forward, init_block_model
from nerfblocks.rendering import (
    Camera,
    RenderConfig,
    block_t_far,
    composite,
    composite_ray,
    generate_rays,
    hierarchical_resample,
    render_image,
    render_rays,
    render_visibility,
    stratified_sample,
)

from helpers import central_difference_check


def composite_oracle(sigmas, colors, t_vals):
    """Direct scalar evaluation of the compositing sums."""
    n = len(sigmas)
    deltas = [t_vals[i + 1] - t_vals[i] for i in range(n)]
    trans, weights = [], []
    acc_inside = 0.0
    for i in range(n):
        T = np.exp(-acc_inside)
        trans.append(T)
        w = T * (1.0 - np.exp(-deltas[i] * sigmas[i]))
        weights.append(w)
        acc_inside += deltas[i] * sigmas[i]
    rgb = np.zeros(3)
    depth_num = 0.0
    for i in range(n):
        rgb += weights[i] * np.asarray(colors[i])
        depth_num += weights[i] * 0.5 * (t_vals[i] + t_vals[i + 1])
    wsum = sum(weights)
    return rgb, np.array(weights), np.array(trans), depth_num / max(wsum, 1e-6)


class FixedRng:
    """Degenerate rng stub returning a constant in [0, 1)."""

    def __init__(self, value=0.5):
        self.value = value

    def random(self, size=None):
        return np.full(size, self.value) if size is not None else self.value


class TestStratifiedSample:
    def test_degenerate_rng_gives_stratum_midpoints(self):
        t = stratified_sample(0.0, 1.0, 2, FixedRng(0.5))
        assert np.allclose(t, [0.25, 0.75])

    def test_within_bounds_and_increasing(self):
        rng = np.random.default_rng(0)
        t = stratified_sample(np.full(50, 0.1), np.full(50, 2.0), 33, rng)
        assert np.all(t >= 0.1) and np.all(t <= 2.0)
        assert np.all(np.diff(t, axis=1) > 0)

    def test_one_sample_per_stratum(self):
        rng = np.random.default_rng(1)
        n = 64
        t = stratified_sample(0.0, 1.0, n, rng)
        counts, _ = np.histogram(t, bins=np.linspace(0, 1, n + 1))
        assert np.all(counts == 1)

    def test_rejects_single_sample(self):
        with pytest.raises(InvalidInputError):
            stratified_sample(0.0, 1.0, 1, FixedRng())


class TestHierarchicalResample:
    def test_all_weight_in_one_interval(self):
        t_vals = np.array([0.0, 1.0, 2.0, 3.0])
        w = np.array([0.0, 5.0, 0.0])
        rng = np.random.default_rng(2)
        out = hierarchical_resample(t_vals, w, 100, rng)
        assert np.all((out >= 1.0) & (out <= 2.0))

    def test_uniform_weights_match_uniform_distribution(self):
        t_vals = np.linspace(0.0, 1.0, 9)
        w = np.ones(8)
        rng = np.random.default_rng(3)
        out = hierarchical_resample(t_vals, w, 100_000, rng)
        counts, _ = np.histogram(out, bins=t_vals)
        stat = chisquare(counts)
        assert stat.pvalue > 0.01

    def test_three_to_one_occupancy(self):
        t_vals = np.array([0.0, 0.5, 1.0])
        w = np.array([3.0, 1.0])
        rng = np.random.default_rng(4)
        out = hierarchical_resample(t_vals, w, 100_000, rng)
        frac_low = float(np.mean(out < 0.5))
        assert abs(frac_low - 0.75) < 0.01

    def test_zero_weights_fall_back_to_stratified(self, caplog):
        t_vals = np.array([0.0, 0.5, 1.0])
        rng = np.random.default_rng(5)
        with caplog.at_level("WARNING"):
            out = hierarchical_resample(t_vals, np.zeros(2), 16, rng)
        assert "fallback" in caplog.text or "stratified" in caplog.text
        assert np.all((out >= 0.0) & (out <= 1.0)) and np.all(np.diff(out) > 0)

    def test_rejects_negative_weights(self):
        with pytest.raises(InvalidInputError):
            hierarchical_resample(np.array([0.0, 1.0]), np.array([-1.0]), 4, FixedRng())


class TestCompositeRay:
    def test_empty_space(self):
        rgb, w, trans, depth = composite_ray(np.zeros(4), np.ones((4, 3)), np.linspace(0, 1, 5))
        assert np.allclose(rgb, 0.0)
        assert np.allclose(trans, 1.0)
        assert np.allclose(w, 0.0)

    def test_opaque_first_sample(self):
        sigmas = np.array([1e6, 1.0, 1.0])
        colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        rgb, w, trans, depth = composite_ray(sigmas, colors, np.array([1.0, 2.0, 3.0, 4.0]))
        assert np.allclose(rgb, [1.0, 0.0, 0.0], atol=1e-9)
        assert w[0] == pytest.approx(1.0, abs=1e-9)
        assert np.all(trans[1:] < 1e-9)
        assert depth == pytest.approx(1.5, rel=1e-6)

    def test_two_sample_hand_values(self):
        sigmas = np.array([0.5, 1.0])
        colors = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        rgb, w, trans, depth = composite_ray(sigmas, colors, np.array([0.0, 1.0, 2.0]))
        w1 = 1.0 - np.exp(-0.5)
        w2 = np.exp(-0.5) * (1.0 - np.exp(-1.0))
        assert w[0] == pytest.approx(w1, abs=1e-12)
        assert w[1] == pytest.approx(w2, abs=1e-12)
        assert w1 == pytest.approx(0.39347, abs=1e-5)
        assert w2 == pytest.approx(0.38340, abs=1e-5)
        assert np.allclose(rgb, [w1, 0.0, w2], atol=1e-12)

    def test_thousand_random_cases_match_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            n = rng.integers(1, 8)
            sigmas = rng.uniform(0.0, 5.0, n)
            colors = rng.random((n, 3))
            t_vals = np.sort(rng.uniform(0.1, 4.0, n + 1))
            t_vals += np.arange(n + 1) * 1e-6
            rgb, w, trans, depth = composite_ray(sigmas, colors, t_vals)
            o_rgb, o_w, o_trans, o_depth = composite_oracle(sigmas, colors, t_vals)
            assert np.allclose(rgb, o_rgb, atol=1e-12)
            assert np.allclose(w, o_w, atol=1e-12)
            assert np.allclose(trans, o_trans, atol=1e-12)
            assert depth == pytest.approx(o_depth, abs=1e-9)

    def test_weight_sum_bounded_and_transmittance_monotone(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = rng.integers(2, 20)
            sigmas = rng.uniform(0.0, 50.0, n)
            t_vals = np.sort(rng.uniform(0.01, 3.0, n + 1)) + np.arange(n + 1) * 1e-7
            _, w, trans, _ = composite_ray(sigmas, rng.random((n, 3)), t_vals)
            assert w.sum() <= 1.0 + 1e-9
            assert np.all(np.diff(trans) <= 1e-12)

    def test_interval_split_invariance(self):
        sigmas = np.array([0.8, 2.0])
        colors = np.array([[0.2, 0.4, 0.6], [0.9, 0.1, 0.3]])
        t_vals = np.array([0.5, 1.0, 2.0])
        rgb_a, _, _, _ = composite_ray(sigmas, colors, t_vals)
        # split each interval in half with identical sigma and color
        sig_b = np.array([0.8, 0.8, 2.0, 2.0])
        col_b = np.repeat(colors, 2, axis=0)
        t_b = np.array([0.5, 0.75, 1.0, 1.5, 2.0])
        rgb_b, _, _, _ = composite_ray(sig_b, col_b, t_b)
        assert np.allclose(rgb_a, rgb_b, atol=1e-9)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        sigmas = Tensor(rng.uniform(0.1, 2.0, size=(2, 4)), requires_grad=True)
        colors = Tensor(rng.random((2, 4, 3)), requires_grad=True)
        t_vals = np.sort(rng.uniform(0.1, 2.0, size=(2, 5)), axis=1) + np.arange(5) * 1e-4

        def fn():
            out = composite(sigmas, colors, t_vals)
            return ad.tensor_mean(out["rgb"] ** 2) + ad.tensor_mean(out["depth"])

        central_difference_check(fn, [sigmas, colors])

    def test_rejects_nonfinite_sigma(self):
        with pytest.raises(ad.GradientError):
            composite_ray(np.array([np.nan]), np.ones((1, 3)), np.array([0.0, 1.0]))

    def test_rejects_unsorted_t(self):
        with pytest.raises(InvalidInputError):
            composite_ray(np.ones(2), np.ones((2, 3)), np.array([0.0, 2.0, 1.0]))


class TestGenerateRays:
    def make_camera(self, pose=None):
        return Camera(
            pose=np.eye(4) if pose is None else pose,
            fx=40.0,
            fy=40.0,
            cx=2.0,
            cy=1.0,
            width=4,
            height=4,
        )

    def test_principal_point_ray_is_forward_axis(self):
        cam = self.make_camera()
        rays = generate_rays(cam)
        idx = np.flatnonzero((rays.pixels == [1, 2]).all(axis=1))[0]
        assert np.allclose(rays.directions[idx], [0.0, 0.0, 1.0], atol=1e-12)

    def test_identity_pose_origins_zero(self):
        rays = generate_rays(self.make_camera())
        assert np.allclose(rays.origins, 0.0)

    def test_projection_table_oracle(self):
        pose = np.eye(4)
        pose[:3, 3] = [0.5, -0.2, 0.1]
        cam = self.make_camera(pose)
        rays = generate_rays(cam)
        for k in range(len(rays)):
            row, col = rays.pixels[k]
            d = np.array([(col - cam.cx) / cam.fx, (row - cam.cy) / cam.fy, 1.0])
            d /= np.linalg.norm(d)
            assert np.allclose(rays.directions[k], d, atol=1e-12)
            assert np.allclose(rays.origins[k], pose[:3, 3])

    def test_rotated_pose_rotates_directions(self):
        yaw = np.deg2rad(90.0)
        pose = np.eye(4)
        pose[:3, :3] = np.array([[np.cos(yaw), -np.sin(yaw), 0], [np.sin(yaw), np.cos(yaw), 0], [0, 0, 1]])
        cam = self.make_camera(pose)
        rays = generate_rays(cam)
        idx = np.flatnonzero((rays.pixels == [1, 2]).all(axis=1))[0]
        assert np.allclose(rays.directions[idx], pose[:3, :3] @ [0, 0, 1], atol=1e-12)

    def test_invalid_intrinsics_rejected(self):
        with pytest.raises(ConfigurationError):
            Camera(pose=np.eye(4), fx=-1.0, fy=1.0, cx=0, cy=0, width=2, height=2)

    def test_non_rigid_pose_rejected(self):
        pose = np.eye(4)
        pose[:3, :3] *= 2.0
        with pytest.raises(ConfigurationError):
            Camera(pose=pose, fx=10, fy=10, cx=1, cy=1, width=2, height=2)

    def test_base_radius_follows_pixel_footprint(self):
        cam = self.make_camera()
        rays = generate_rays(cam)
        assert np.allclose(rays.base_radius, (1.0 / 40.0) * 2.0 / np.sqrt(12.0))


@pytest.fixture(scope="module")
def tiny_model():
    return init_block_model([0.0, 0.0, 0.0], 0.4, n_appearance=2, segment_ids=[0], seed=3)


class TestRenderRays:
    def rays(self, n=6, seed=0):
        rng = np.random.default_rng(seed)
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return (
            rng.normal(scale=0.02, size=(n, 3)).astype(np.float32),
            d.astype(np.float32),
            np.full(n, 0.05, np.float32),
            np.full(n, 1.2, np.float32),
            np.full(n, 0.03, np.float32),
        )

    def test_zero_density_scene_renders_sky_only(self, tiny_model):
        model = init_block_model([0, 0, 0], 0.4, n_appearance=1, seed=4)
        for net in (model.f_sigma, model.f_sigma_coarse):
            net.biases[-1].data[:] = -20.0  # softplus(-20) ~ 0
        model.sky_logit.data[:] = -20.0  # near-black sky
        o, d, tn, tf, br = self.rays()
        out = render_rays(model, o, d, tn, tf, br, np.random.default_rng(0), appearance_ids=np.zeros(6, int), exposure=np.ones((6, 2)))
        assert float(np.abs(ad.data_of(out["rgb"])).max()) < 1e-6

    def test_fixed_seed_bit_identical(self, tiny_model):
        o, d, tn, tf, br = self.rays()
        kw = dict(appearance_ids=np.zeros(6, int), exposure=np.ones((6, 2)))
        a = render_rays(tiny_model, o, d, tn, tf, br, np.random.default_rng(9), **kw)
        b = render_rays(tiny_model, o, d, tn, tf, br, np.random.default_rng(9), **kw)
        assert np.array_equal(ad.data_of(a["rgb"]), ad.data_of(b["rgb"]))
        assert np.array_equal(ad.data_of(a["depth"]), ad.data_of(b["depth"]))

    def test_fine_disabled_matches_single_pass_oracle(self, tiny_model):
        model = tiny_model
        o, d, tn, tf, br = self.rays(4, seed=2)
        out = render_rays(
            model, o, d, tn, tf, br, np.random.default_rng(7),
            appearance_ids=np.zeros(4, int), exposure=np.ones((4, 2)), n_coarse=16, n_fine=0,
        )
        # independent single-pass renderer with the same sample boundaries
        rng = np.random.default_rng(7)
        bounds = stratified_sample(tn, tf, 17, rng).astype(np.float32)
        g = frustum_to_gaussian(o, d, bounds[:, :-1], bounds[:, 1:], br[:, None], full_covariance=False)
        feats = integrated_positional_encode(g, model.encoding.levels_position)
        sigma, feature = density_forward(model.f_sigma_coarse, ad.reshape(feats, (4 * 16, -1)))
        from nerfblocks.encoding import exposure_encode

        dir_enc = positional_encode(d, model.encoding.levels_direction)
        expo = exposure_encode(np.ones(4), np.ones(4), model.encoding).astype(np.float32)
        emb = model.appearance.lookup(np.zeros(4, int))
        rgb = color_forward(model.f_color_coarse, feature, dir_enc, expo, emb, n_samples=16)
        res = composite(ad.reshape(sigma, (4, 16)), ad.reshape(rgb, (4, 16, 3)), bounds)
        sky = ad.data_of(model.sky_color())
        expected = ad.data_of(res["rgb"]) + (1.0 - ad.data_of(res["acc"]))[:, None] * sky
        assert np.allclose(ad.data_of(out["rgb"]), expected, atol=1e-7)

    def test_weight_sum_bounded(self, tiny_model):
        o, d, tn, tf, br = self.rays(16, seed=5)
        out = render_rays(tiny_model, o, d, tn, tf, br, np.random.default_rng(1),
                          appearance_ids=np.zeros(16, int), exposure=np.ones((16, 2)))
        acc = ad.data_of(out["acc"])
        assert np.all(acc <= 1.0 + 1e-6) and np.all(acc >= 0.0)


class TestRenderImage:
    def make_camera(self, w=4, h=4):
        pose = np.eye(4)
        pose[:3, 3] = [0.0, 0.0, 0.05]
        f = w / (2 * np.tan(np.deg2rad(60) / 2))
        return Camera(pose=pose, fx=f, fy=f, cx=(w - 1) / 2, cy=(h - 1) / 2, width=w, height=h)

    def test_matches_per_ray_rendering(self, tiny_model):
        cam = self.make_camera(2, 2)
        cfg = RenderConfig(n_coarse=8, n_fine=8, seed=11, chunk=64)
        img = render_image(tiny_model, cam, appearance_id=0, exposure=(1.0, 1.0), cfg=cfg)
        rays = generate_rays(cam, t_far=block_t_far(tiny_model), dtype=tiny_model.dtype)
        out = render_rays(
            tiny_model,
            rays.origins,
            rays.directions,
            rays.t_near,
            rays.t_far,
            rays.base_radius,
            np.random.default_rng(11),
            appearance_ids=np.zeros(4, int),
            exposure=np.ones((4, 2)),
            n_coarse=8,
            n_fine=8,
        )
        assert np.allclose(img.rgb.reshape(-1, 3), np.clip(ad.data_of(out["rgb"]), 0, 1), atol=1e-7)

    def test_untrained_model_in_range(self, tiny_model):
        cam = self.make_camera()
        img = render_image(tiny_model, cam, appearance_id=0, cfg=RenderConfig(n_coarse=8, n_fine=8))
        assert np.all((img.rgb >= 0) & (img.rgb <= 1))
        img.validate()

    def test_resolution_doubling_keeps_shared_centers(self, tiny_model):
        # integer pixel (u, v) of the WxH grid maps to pixel (2u, 2v) when
        # width, height, fx, fy, cx, cy are all doubled
        cam1 = self.make_camera(4, 4)
        cam2 = Camera(
            pose=cam1.pose, fx=2 * cam1.fx, fy=2 * cam1.fy, cx=2 * cam1.cx, cy=2 * cam1.cy, width=8, height=8
        )
        r1 = generate_rays(cam1)
        r2 = generate_rays(cam2)
        d1 = r1.directions.reshape(4, 4, 3)
        d2 = r2.directions.reshape(8, 8, 3)
        assert np.allclose(d1, d2[::2, ::2], atol=1e-12)
        # base radius halves with doubled resolution
        assert r2.base_radius[0] == pytest.approx(r1.base_radius[0] / 2)

    def test_visibility_map_mean_consistency(self, tiny_model):
        cam = self.make_camera()
        img = render_image(
            tiny_model, cam, appearance_id=0, cfg=RenderConfig(n_coarse=8, n_fine=8, compute_visibility=True)
        )
        img.validate()
        assert img.per_pixel_visibility is not None
        assert img.mean_visibility == pytest.approx(float(img.per_pixel_visibility.mean()), abs=1e-9)


class TestRenderVisibility:
    def saturated(self, value):
        model = init_block_model([0, 0, 0], 0.4, n_appearance=1, seed=6)
        model.f_visibility.biases[-1].data[:] = value
        return model

    def test_saturated_high(self):
        model = self.saturated(30.0)
        cam = TestRenderImage().make_camera()
        assert render_visibility(model, cam) == pytest.approx(1.0, abs=1e-6)

    def test_saturated_low(self):
        model = self.saturated(-30.0)
        cam = TestRenderImage().make_camera()
        assert render_visibility(model, cam) == pytest.approx(0.0, abs=1e-6)

    def test_untrained_in_unit_interval(self, tiny_model):
        cam = TestRenderImage().make_camera()
        v = render_visibility(tiny_model, cam)
        assert 0.0 <= v <= 1.0
