import numpy as np
import pytest
from scipy import stats

from ivusim import bmode
from ivusim.bmode import (
    PSFParams,
    RFImage,
    ScattererField,
    convolve_rf,
    envelope,
    generate_scatterers,
    log_compress,
    psf_kernel,
    simulate,
    simulate_envelope,
)
from ivusim.dataset import EchogenicityMap, synth_phantom
from ivusim.imaging import TissueClass

from _oracles import ref_correlate2d


class TestScatterers:
    def test_variance_matches_echogenicity_squared(self):
        c = 0.7
        emap = EchogenicityMap(np.full((256, 256), c))
        field = generate_scatterers(emap, seed=3)
        assert field.data.var() == pytest.approx(c * c, rel=0.05)

    def test_zero_map_gives_zero_field(self):
        emap = EchogenicityMap(np.zeros((32, 32)))
        field = generate_scatterers(emap, seed=0)
        assert np.all(field.data == 0.0)

    def test_scaling_map_scales_field_exactly(self):
        base = EchogenicityMap(np.random.default_rng(1).uniform(0, 1, (40, 40)))
        doubled = EchogenicityMap(2.0 * base.data)
        f1 = generate_scatterers(base, seed=7)
        f2 = generate_scatterers(doubled, seed=7)
        assert np.array_equal(f2.data, 2.0 * f1.data)

    def test_scaling_by_arbitrary_factor(self):
        base = EchogenicityMap(np.random.default_rng(2).uniform(0, 1, (40, 40)))
        scaled = EchogenicityMap(1.7 * base.data)
        f1 = generate_scatterers(base, seed=9)
        f2 = generate_scatterers(scaled, seed=9)
        np.testing.assert_allclose(f2.data, 1.7 * f1.data, rtol=1e-13)

    def test_seed_determinism(self):
        emap = EchogenicityMap(np.full((32, 32), 0.4))
        a = generate_scatterers(emap, seed=5)
        b = generate_scatterers(emap, seed=5)
        c = generate_scatterers(emap, seed=6)
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_nonfinite_field_rejected(self):
        bad = np.ones((8, 8))
        bad[2, 2] = np.nan
        with pytest.raises(ValueError):
            ScattererField(bad)


class TestPsfKernel:
    def test_outer_product_separability(self):
        k = psf_kernel(PSFParams())
        assert np.abs(k.kernel2d - np.outer(k.axial, k.lateral)).max() == 0.0

    def test_unit_l2_norm(self):
        k = psf_kernel(PSFParams(f0=0.2, sigma_axial=3.0, sigma_lateral=2.0))
        assert np.sqrt((k.kernel2d**2).sum()) == pytest.approx(1.0, abs=1e-12)

    def test_truncation_at_three_sigma_odd_length(self):
        k = psf_kernel(PSFParams(f0=0.25, sigma_axial=2.5, sigma_lateral=4.0))
        assert k.axial.size == 2 * int(np.ceil(3 * 2.5)) + 1
        assert k.lateral.size == 2 * int(np.ceil(3 * 4.0)) + 1
        assert k.axial.size % 2 == 1 and k.lateral.size % 2 == 1

    def test_axial_sign_changes_follow_carrier(self):
        # 1/f0 = 8 px: the windowed cosine flips sign every 4 px
        k = psf_kernel(PSFParams(f0=0.125, sigma_axial=4.0))
        center = k.axial.size // 2
        for r in range(1, center + 1):
            expected = np.cos(2 * np.pi * 0.125 * r)
            if abs(expected) > 0.1:
                assert np.sign(k.axial[center + r]) == np.sign(expected)

    def test_factors_are_even_symmetric(self):
        k = psf_kernel(PSFParams())
        np.testing.assert_allclose(k.axial, k.axial[::-1], atol=1e-15)
        np.testing.assert_allclose(k.lateral, k.lateral[::-1], atol=1e-15)

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            PSFParams(f0=0.0)
        with pytest.raises(ValueError):
            PSFParams(f0=0.5)
        with pytest.raises(ValueError, match="degenerate"):
            PSFParams(sigma_axial=0.0)
        with pytest.raises(ValueError, match="degenerate"):
            PSFParams(sigma_lateral=-1.0)


class TestConvolveRf:
    def test_impulse_response_is_flipped_kernel(self):
        kern = np.arange(15, dtype=float).reshape(3, 5) + 1.0
        field = np.zeros((32, 32))
        field[16, 16] = 1.0
        out = convolve_rf(ScattererField(field), kern).data
        patch = out[15:18, 14:19]
        np.testing.assert_allclose(patch, kern[::-1, ::-1], atol=1e-14)

    def test_impulse_response_separable_kernel(self):
        k = psf_kernel(PSFParams(f0=0.25, sigma_axial=1.0, sigma_lateral=1.0))
        field = np.zeros((32, 32))
        field[16, 16] = 1.0
        out = convolve_rf(ScattererField(field), k).data
        ha, hl = k.axial.size // 2, k.lateral.size // 2
        patch = out[16 - ha : 16 + ha + 1, 16 - hl : 16 + hl + 1]
        np.testing.assert_allclose(patch, k.kernel2d[::-1, ::-1], atol=1e-14)

    def test_linearity(self):
        rng = np.random.default_rng(11)
        f = rng.standard_normal((32, 32))
        g = rng.standard_normal((32, 32))
        k = psf_kernel(PSFParams())
        lhs = convolve_rf(ScattererField(2.5 * f - 1.25 * g), k).data
        rhs = (
            2.5 * convolve_rf(ScattererField(f), k).data
            - 1.25 * convolve_rf(ScattererField(g), k).data
        )
        assert np.abs(lhs - rhs).max() < 1e-10

    def test_matches_reference_correlation(self):
        rng = np.random.default_rng(12)
        field = rng.standard_normal((32, 32))
        k = psf_kernel(PSFParams(f0=0.25, sigma_axial=1.5, sigma_lateral=2.0))
        fast = convolve_rf(ScattererField(field), k).data
        ref = ref_correlate2d(field, k.kernel2d)
        assert np.abs(fast - ref).max() < 1e-6

    def test_raw_2d_kernel_matches_reference(self):
        rng = np.random.default_rng(13)
        field = rng.standard_normal((32, 32))
        kern = rng.standard_normal((5, 7))
        fast = convolve_rf(ScattererField(field), kern).data
        ref = ref_correlate2d(field, kern)
        assert np.abs(fast - ref).max() < 1e-6

    def test_separable_path_matches_dense_path(self):
        rng = np.random.default_rng(14)
        field = rng.standard_normal((48, 48))
        k = psf_kernel(PSFParams())
        a = convolve_rf(ScattererField(field), k).data
        b = convolve_rf(ScattererField(field), k.kernel2d).data
        assert np.abs(a - b).max() < 1e-10

    def test_space_invariance_on_interior(self):
        rng = np.random.default_rng(15)
        base = np.zeros((64, 64))
        base[20:36, 20:36] = rng.standard_normal((16, 16))
        shifted = np.roll(np.roll(base, 3, axis=0), 5, axis=1)
        k = psf_kernel(PSFParams())
        out_a = convolve_rf(ScattererField(base), k).data
        out_b = convolve_rf(ScattererField(shifted), k).data
        moved = np.roll(np.roll(out_a, 3, axis=0), 5, axis=1)
        m = 16
        assert np.abs(out_b[m:-m, m:-m] - moved[m:-m, m:-m]).max() < 1e-10

    def test_kernel_must_be_smaller_than_field(self):
        field = ScattererField(np.ones((8, 8)))
        with pytest.raises(ValueError, match="smaller"):
            convolve_rf(field, np.ones((9, 3)))
        with pytest.raises(ValueError, match="smaller"):
            convolve_rf(field, psf_kernel(PSFParams(sigma_lateral=4.0)))


class TestEnvelope:
    def test_pure_cosine_has_unit_envelope(self):
        r = np.arange(256, dtype=float)
        col = np.cos(2 * np.pi * 0.125 * r)
        env = envelope(RFImage(np.tile(col[:, None], (1, 4))))
        interior = env[8:-8, :]
        assert np.abs(interior - 1.0).max() < 0.02

    def test_envelope_bounds_signal(self):
        rng = np.random.default_rng(21)
        rf = rng.standard_normal((64, 16))
        env = envelope(RFImage(rf))
        assert np.all(env >= np.abs(rf) - 1e-12)

    def test_positive_homogeneity_exact_for_power_of_two(self):
        rng = np.random.default_rng(22)
        rf = rng.standard_normal((64, 8))
        e1 = envelope(RFImage(rf))
        e2 = envelope(RFImage(2.0 * rf))
        assert np.array_equal(e2, 2.0 * e1)

    def test_positive_homogeneity_general(self):
        rng = np.random.default_rng(23)
        rf = rng.standard_normal((64, 8))
        e1 = envelope(RFImage(rf))
        e2 = envelope(RFImage(1.7 * rf))
        np.testing.assert_allclose(e2, 1.7 * e1, rtol=1e-12, atol=1e-12)

    def test_nonfinite_rejected(self):
        rf = np.ones((16, 4))
        rf[3, 1] = np.inf
        with pytest.raises(ValueError):
            envelope(RFImage(rf))


class TestLogCompress:
    def test_boundary_and_midpoint_values(self):
        dr = 40.0
        env = np.array([[1.0, 10 ** (-dr / 20), 10 ** (-dr / 40), 1e-9]])
        img = log_compress(env, dr)
        assert img.data[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert img.data[0, 1] == pytest.approx(0.0, abs=1e-12)
        assert img.data[0, 2] == pytest.approx(0.5, abs=1e-12)
        assert img.data[0, 3] == 0.0  # below the floor, clipped

    def test_all_zero_envelope_maps_to_zeros(self):
        img = log_compress(np.zeros((16, 16)))
        assert np.all(img.data == 0.0)

    def test_output_range(self):
        rng = np.random.default_rng(31)
        env = rng.uniform(0, 3.0, (64, 64))
        img = log_compress(env, 40.0)
        assert img.data.min() >= 0.0 and img.data.max() <= 1.0
        assert img.data.max() == pytest.approx(1.0, abs=1e-12)

    def test_monotone_in_envelope(self):
        env = np.linspace(0.0, 2.0, 101)[None, :]
        img = log_compress(env, 40.0)
        assert np.all(np.diff(img.data[0]) >= 0.0)

    def test_scale_invariance(self):
        # compression normalizes by the peak, so global gain drops out
        rng = np.random.default_rng(32)
        env = rng.uniform(0, 1.0, (32, 32))
        a = log_compress(env, 40.0)
        b = log_compress(3.7 * env, 40.0)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_invalid_dynamic_range_rejected(self):
        with pytest.raises(ValueError):
            log_compress(np.ones((4, 4)), 0.0)
        with pytest.raises(ValueError):
            log_compress(np.ones((4, 4)), -10.0)


class TestSimulate:
    def test_seed_determinism(self):
        _, emap = synth_phantom(seed=0)
        a = simulate(emap, seed=42)
        b = simulate(emap, seed=42)
        c = simulate(emap, seed=43)
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_output_shape_and_range(self):
        _, emap = synth_phantom(seed=1)
        img = simulate(emap, seed=0)
        assert img.data.shape == emap.data.shape
        assert img.data.min() >= 0.0 and img.data.max() <= 1.0

    def test_zero_map_gives_zero_image(self):
        emap = EchogenicityMap(np.zeros((64, 64)))
        img = simulate(emap, seed=0)
        assert np.all(img.data == 0.0)

    def test_region_brightness_ordering(self):
        # lumen should render darkest, externa brightest, in >= 19/20 runs
        ordered = 0
        for seed in range(20):
            mask, emap = synth_phantom(seed=seed)
            img = simulate(emap, seed=seed + 1000)
            means = [
                img.data[mask.data == c].mean()
                for c in (TissueClass.LUMEN, TissueClass.MEDIA, TissueClass.EXTERNA)
            ]
            if means[0] < means[1] < means[2]:
                ordered += 1
        assert ordered >= 19

    def test_envelope_speckle_is_rayleigh(self):
        # constant echogenicity -> envelope amplitude follows a Rayleigh law
        emap = EchogenicityMap(np.full((256, 256), 0.5))
        env = simulate_envelope(emap, seed=2)
        m = 14
        interior = env[m:-m, m:-m].ravel()
        assert interior.size >= 10_000
        scale = np.sqrt(np.mean(interior**2) / 2.0)
        ks = stats.kstest(interior, "rayleigh", args=(0.0, scale))
        assert ks.statistic < 0.02
