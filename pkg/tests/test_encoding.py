"""Encodings against independent oracles: scalar re-evaluation, Monte-Carlo
expectations, and frustum moment estimation."""

import numpy as np
import pytest

from nerfblocks.encoding import (
    ConicalGaussian,
    EncodingConfig,
    InvalidInputError,
    exposure_encode,
    frustum_to_gaussian,
    integrated_positional_encode,
    positional_encode,
)


def pe_oracle(z, levels):
    """Straight-line per-element sinusoidal encoding."""
    out = []
    for l in range(levels):
        out.extend(np.sin(2.0**l * np.asarray(z)))
        out.extend(np.cos(2.0**l * np.asarray(z)))
    return np.asarray(out)


class TestPositionalEncode:
    def test_zero_input(self):
        assert np.allclose(positional_encode(np.array([0.0]), 2), [0, 1, 0, 1])

    def test_half_pi(self):
        out = positional_encode(np.array([np.pi / 2]), 1)
        assert np.allclose(out, [1.0, 0.0], atol=1e-12)

    def test_matches_scalar_oracle(self):
        z = np.array([0.3, -1.2])
        got = positional_encode(z, 8)
        assert got.shape == (32,)
        assert np.allclose(got, pe_oracle(z, 8), atol=1e-12)

    @pytest.mark.parametrize("levels", [1, 2, 4, 8, 16])
    @pytest.mark.parametrize("dim", [1, 2, 3, 4])
    def test_output_length(self, levels, dim):
        z = np.linspace(-1, 1, dim)
        assert positional_encode(z, levels).shape == (2 * levels * dim,)

    def test_range_bounded(self):
        rng = np.random.default_rng(0)
        z = rng.uniform(-50, 50, size=(100, 3))
        out = positional_encode(z, 10)
        assert np.abs(out).max() <= 1.0 + 1e-12

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidInputError):
            positional_encode(np.array([np.nan]), 2)

    def test_rejects_zero_levels(self):
        with pytest.raises(InvalidInputError):
            positional_encode(np.array([1.0]), 0)


class TestIntegratedEncode:
    def test_zero_covariance_equals_plain_encoding(self):
        rng = np.random.default_rng(1)
        mu = rng.normal(size=3)
        g = ConicalGaussian(mu=mu, sigma=np.zeros((3, 3)))
        got = integrated_positional_encode(g, 6)
        assert np.allclose(got, positional_encode(mu, 6), atol=1e-12)

    def test_huge_variance_damps_to_zero(self):
        g = ConicalGaussian(mu=np.array([0.3, -2.0, 5.0]), sigma=np.diag([1e6, 1e6, 1e6]))
        out = integrated_positional_encode(g, 4)
        assert np.abs(out).max() < 1e-6

    def test_matches_monte_carlo_expectation(self):
        # E[pe(X)] over X ~ N(mu, Sigma), 1e6 samples, within 3 standard errors
        mu = np.array([0.5, 0.0, 0.0])
        var = np.array([0.1, 0.1, 0.1])
        g = ConicalGaussian(mu=mu, sigma=np.diag(var))
        got = integrated_positional_encode(g, 2)
        rng = np.random.default_rng(2024)
        n = 1_000_000
        samples = mu + rng.standard_normal((n, 3)) * np.sqrt(var)
        # vectorized oracle: sin/cos per level, same ordering as the encoder
        cols = []
        for l in range(2):
            cols.append(np.sin(2.0**l * samples))
            cols.append(np.cos(2.0**l * samples))
        feats = np.concatenate(cols, axis=1)
        mc_mean = feats.mean(axis=0)
        mc_se = feats.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(got - mc_mean) <= 3.0 * mc_se + 1e-12)

    def test_magnitude_monotone_in_variance(self):
        mu = np.array([0.7, -0.3, 1.1])
        prev = None
        for scale in [0.0, 0.05, 0.2, 1.0, 5.0]:
            g = ConicalGaussian(mu=mu, sigma=np.eye(3) * scale)
            mag = np.abs(integrated_positional_encode(g, 6))
            if prev is not None:
                assert np.all(mag <= prev + 1e-12)
            prev = mag

    def test_rejects_invalid_gaussian(self):
        g = ConicalGaussian(mu=np.zeros(3), sigma=None, diag_sigma=np.array([-1.0, 0.0, 0.0]))
        with pytest.raises(InvalidInputError):
            integrated_positional_encode(g, 3)


def frustum_mc_oracle(origin, direction, t0, t1, base_radius, n=10_000_000, seed=5):
    """Uniform samples over the conical frustum volume: t ~ pdf ∝ t²,
    then uniform over the disk of radius base_radius * t."""
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    t = (t0**3 + u * (t1**3 - t0**3)) ** (1.0 / 3.0)
    r = base_radius * t * np.sqrt(rng.random(n))
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    direction = np.asarray(direction, dtype=float)
    # orthonormal frame around the axis
    helper = np.array([1.0, 0.0, 0.0]) if abs(direction[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(direction, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(direction, e1)
    pts = (
        np.asarray(origin)
        + t[:, None] * direction
        + (r * np.cos(phi))[:, None] * e1
        + (r * np.sin(phi))[:, None] * e2
    )
    return pts.mean(axis=0), np.cov(pts.T, ddof=0)


class TestFrustumToGaussian:
    def test_degenerate_frustum_collapses_to_point(self):
        origin = np.array([0.1, -0.2, 0.3])
        direction = np.array([0.0, 1.0, 0.0])
        g = frustum_to_gaussian(origin, direction, 1.0, 1.0 + 1e-9, 1e-9)
        assert np.allclose(g.mu, origin + 1.0 * direction, atol=1e-6)
        assert np.abs(g.sigma).max() < 1e-9

    def test_axis_aligned_symmetry(self):
        g = frustum_to_gaussian(np.zeros(3), np.array([1.0, 0.0, 0.0]), 0.5, 1.5, 0.02)
        sigma = g.sigma
        assert sigma[0, 1] == pytest.approx(0.0, abs=1e-15)
        assert sigma[0, 2] == pytest.approx(0.0, abs=1e-15)
        assert sigma[1, 2] == pytest.approx(0.0, abs=1e-15)
        assert sigma[1, 1] == pytest.approx(sigma[2, 2], rel=1e-12)

    def test_matches_monte_carlo_moments(self):
        origin = np.zeros(3)
        direction = np.array([0.0, 0.0, 1.0])
        g = frustum_to_gaussian(origin, direction, 1.0, 2.0, 0.01)
        g.validate()
        mc_mean, mc_cov = frustum_mc_oracle(origin, direction, 1.0, 2.0, 0.01)
        assert np.linalg.norm(g.mu - mc_mean) <= 1e-3 * np.linalg.norm(mc_mean)
        # diagonal entries at 1e-3 relative; off-diagonals vanish by symmetry
        assert np.allclose(np.diag(g.sigma), np.diag(mc_cov), rtol=1e-3)
        off = mc_cov - np.diag(np.diag(mc_cov))
        assert np.abs(off).max() < 1e-6

    def test_mu_lies_on_ray(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            origin = rng.normal(size=3)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            t0 = rng.uniform(0.1, 1.0)
            t1 = t0 + rng.uniform(0.05, 2.0)
            g = frustum_to_gaussian(origin, d, t0, t1, 0.05)
            rel = g.mu - origin
            dist_along = rel @ d
            assert t0 <= dist_along <= t1
            perp = rel - dist_along * d
            assert np.linalg.norm(perp) < 1e-6

    def test_covariance_trace_monotone(self):
        base = frustum_to_gaussian(np.zeros(3), np.array([1.0, 0, 0]), 1.0, 1.5, 0.01)
        widths = [1.5, 2.0, 3.0, 4.0]
        prev = np.trace(base.sigma)
        for t1 in widths:
            g = frustum_to_gaussian(np.zeros(3), np.array([1.0, 0, 0]), 1.0, t1, 0.01)
            tr = np.trace(g.sigma)
            assert tr >= prev - 1e-15
            prev = tr
        prev = None
        for radius in [0.005, 0.01, 0.05, 0.1]:
            g = frustum_to_gaussian(np.zeros(3), np.array([1.0, 0, 0]), 1.0, 2.0, radius)
            tr = np.trace(g.sigma)
            if prev is not None:
                assert tr >= prev
            prev = tr

    def test_rejects_degenerate_interval(self):
        with pytest.raises(InvalidInputError):
            frustum_to_gaussian(np.zeros(3), np.array([1.0, 0, 0]), 1.0, 1.0, 0.01)
        with pytest.raises(InvalidInputError):
            frustum_to_gaussian(np.zeros(3), np.array([1.0, 0, 0]), 2.0, 1.0, 0.01)

    def test_batched_matches_scalar(self):
        rng = np.random.default_rng(11)
        origins = rng.normal(size=(4, 3))
        dirs = rng.normal(size=(4, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t0 = np.abs(rng.uniform(0.2, 0.5, size=(4, 5)))
        t1 = t0 + rng.uniform(0.1, 0.4, size=(4, 5))
        radius = np.full((4, 1), 0.02)
        g = frustum_to_gaussian(origins, dirs, t0, t1, radius)
        for i in range(4):
            for j in range(5):
                gs = frustum_to_gaussian(origins[i], dirs[i], t0[i, j], t1[i, j], 0.02)
                assert np.allclose(g.mu[i, j], gs.mu, atol=1e-12)
                assert np.allclose(g.sigma[i, j], gs.sigma, atol=1e-14)


class TestExposureEncode:
    def test_reference_exposure(self):
        cfg = EncodingConfig()
        got = exposure_encode(10.0, 100.0, cfg)  # shutter*gain = 1000, scale 1000
        assert np.allclose(got, pe_oracle([1.0], 4))

    def test_tiny_exposure_approaches_zero_encoding(self):
        cfg = EncodingConfig()
        got = exposure_encode(1e-12, 1e-6, cfg)
        assert np.allclose(got, [0, 1, 0, 1, 0, 1, 0, 1], atol=1e-9)

    def test_matches_scalar_oracle(self):
        cfg = EncodingConfig()
        got = exposure_encode(0.005, 40.0, cfg)
        assert got.shape == (8,)
        assert np.allclose(got, pe_oracle([0.0002], 4), atol=1e-12)

    def test_rejects_nonpositive(self):
        cfg = EncodingConfig()
        with pytest.raises(InvalidInputError):
            exposure_encode(0.0, 1.0, cfg)
        with pytest.raises(InvalidInputError):
            exposure_encode(1.0, -2.0, cfg)


def test_encoding_config_validation():
    with pytest.raises(InvalidInputError):
        EncodingConfig(levels_position=0)
    with pytest.raises(InvalidInputError):
        EncodingConfig(exposure_scale=0.0)
    cfg = EncodingConfig()
    assert cfg.exposure_dim == 8
