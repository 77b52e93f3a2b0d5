import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ivusim.dataset import TissueLabelMask, mask_to_echogenicity, synth_phantom
from ivusim.evaluation import (
    CLASS_PAIRS,
    RegionPMF,
    Table1Report,
    js_divergence,
    load_vtt_key,
    pmf_from_values,
    pooled_region_pmf,
    region_pmf,
    table1_report,
    table1_to_csv,
    table1_to_text,
    table2_report,
    table2_to_text,
    vtt_export,
    vtt_score,
    wilson_interval,
)
from ivusim.imaging import CartesianImage, PolarImage, TissueClass, read_png

from _oracles import ref_js_divergence


def ring_mask(n=32):
    labels = np.zeros((n, n), dtype=np.uint8)
    labels[n // 3 : 2 * n // 3] = 1
    labels[2 * n // 3 :] = 2
    return TissueLabelMask(labels, "polar")


def corpus_from_phantoms(seeds, image_seed_offset=0, brightness=1.0):
    """Annotated (image, mask) items: piecewise-constant noisy intensities."""
    items = []
    for s in seeds:
        mask, _ = synth_phantom(seed=s)
        rng = np.random.default_rng(s + image_seed_offset)
        base = {0: 0.1, 1: 0.45, 2: 0.75}
        img = np.zeros(mask.data.shape)
        for cls, mean in base.items():
            sel = mask.data == cls
            img[sel] = np.clip(
                brightness * mean + 0.05 * rng.standard_normal(sel.sum()), 0, 1
            )
        items.append((PolarImage(img), mask))
    return items


class TestRegionPMF:
    def test_constant_half_lands_in_middle_bin(self):
        mask = ring_mask()
        img = PolarImage(np.full((32, 32), 0.5))
        pmf = region_pmf(img, mask, TissueClass.MEDIA)
        assert pmf.mass[128] == 1.0
        assert pmf.mass.sum() == pytest.approx(1.0, abs=1e-12)

    def test_mass_sums_to_one(self):
        rng = np.random.default_rng(0)
        img = PolarImage(rng.uniform(0, 1, (32, 32)))
        for cls in TissueClass:
            pmf = region_pmf(img, ring_mask(), cls)
            assert pmf.mass.sum() == pytest.approx(1.0, abs=1e-9)
            assert pmf.region == cls

    def test_uniform_values_spread_thin(self):
        rng = np.random.default_rng(1)
        pmf = pmf_from_values(rng.uniform(0, 1, 200_000), TissueClass.LUMEN)
        assert pmf.n_pixels >= 100_000
        assert pmf.mass.max() < 3 / 256

    def test_full_intensity_goes_to_last_bin(self):
        pmf = pmf_from_values(np.array([1.0, 1.0]), TissueClass.LUMEN)
        assert pmf.mass[255] == 1.0

    def test_class_counts_partition_grid(self):
        mask = ring_mask()
        img = PolarImage(np.random.default_rng(2).uniform(0, 1, (32, 32)))
        total = sum(
            region_pmf(img, mask, cls).n_pixels for cls in TissueClass
        )
        assert total == mask.data.size

    def test_empty_region_error_names_class(self):
        labels = np.zeros((8, 8), dtype=np.uint8)
        mask = TissueLabelMask(labels, "polar")
        img = PolarImage(np.zeros((8, 8)))
        with pytest.raises(ValueError, match="MEDIA"):
            region_pmf(img, mask, TissueClass.MEDIA)

    def test_grid_mismatch_rejected(self):
        img = PolarImage(np.zeros((16, 16)))
        with pytest.raises(ValueError, match="does not match"):
            region_pmf(img, ring_mask(32), TissueClass.LUMEN)

    def test_cart_domain_mask_rejected(self):
        labels = np.zeros((16, 16), dtype=np.uint8)
        labels[8:] = 1
        mask = TissueLabelMask(labels, "cart")
        with pytest.raises(ValueError, match="polar"):
            region_pmf(PolarImage(np.zeros((16, 16))), mask, TissueClass.LUMEN)

    def test_pooled_pmf_weights_by_pixel_count(self):
        # pooling concatenates pixels, it does not average per-image PMFs
        a = (PolarImage(np.full((4, 4), 0.25)), ring_mask(4))
        big = np.full((8, 8), 0.75)
        b = (PolarImage(big), ring_mask(8))
        cls = TissueClass.LUMEN
        pooled = pooled_region_pmf([a, b], cls)
        n_a = region_pmf(*a, cls).n_pixels
        n_b = region_pmf(*b, cls).n_pixels
        assert pooled.n_pixels == n_a + n_b
        assert pooled.mass[64] == pytest.approx(n_a / (n_a + n_b))
        assert pooled.mass[192] == pytest.approx(n_b / (n_a + n_b))

    def test_invalid_pmf_construction(self):
        with pytest.raises(ValueError):
            RegionPMF(np.full(256, 1.0 / 128), TissueClass.LUMEN, 10)
        with pytest.raises(ValueError, match="empty"):
            RegionPMF(np.full(256, 1.0 / 256), TissueClass.LUMEN, 0)


class TestJsDivergence:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(0, 1, 256)
        p /= p.sum()
        assert js_divergence(p, p) == 0.0

    def test_disjoint_point_masses_hit_unit_bound(self):
        p = np.zeros(256)
        q = np.zeros(256)
        p[10] = 1.0
        q[200] = 1.0
        assert js_divergence(p, q) == 1.0

    def test_matches_unrolled_oracle(self):
        rng = np.random.default_rng(4)
        p = rng.uniform(0, 1, 256)
        q = rng.uniform(0, 1, 256)
        p[::3] = 0.0
        q[1::4] = 0.0
        p /= p.sum()
        q /= q.sum()
        assert js_divergence(p, q) == pytest.approx(
            ref_js_divergence(p, q), abs=1e-12
        )

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length mismatch"):
            js_divergence(np.full(256, 1 / 256), np.full(128, 1 / 128))

    def test_accepts_region_pmf_objects(self):
        a = pmf_from_values(np.full(50, 0.2), TissueClass.LUMEN)
        b = pmf_from_values(np.full(50, 0.8), TissueClass.MEDIA)
        assert js_divergence(a, b) == 1.0
        assert js_divergence(a, a) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, 64, elements=st.floats(0.0, 1.0)),
        arrays(np.float64, 64, elements=st.floats(0.0, 1.0)),
    )
    def test_symmetry_bounds_and_zero_iff_equal(self, a, b):
        if a.sum() == 0 or b.sum() == 0:
            return
        p = a / a.sum()
        q = b / b.sum()
        d = js_divergence(p, q)
        assert js_divergence(q, p) == pytest.approx(d, abs=1e-12)
        assert -1e-12 <= d <= 1.0 + 1e-12
        if np.allclose(p, q, atol=1e-15):
            assert d < 1e-12
        if d < 1e-12:
            assert np.allclose(p, q, atol=1e-6)


class TestTableReports:
    def test_identical_corpora_give_zero_divergence(self):
        items = corpus_from_phantoms(range(8))
        rep = table1_report(items, items, n=5, seed=0)
        for cls in TissueClass:
            assert rep.per_class[cls] == pytest.approx(0.0, abs=1e-12)

    def test_brighter_corpus_diverges(self):
        real = corpus_from_phantoms(range(8))
        dim = corpus_from_phantoms(range(8), image_seed_offset=100, brightness=0.5)
        rep = table1_report(real, dim, n=5, seed=0)
        assert all(v > 0.1 for v in rep.per_class.values())

    def test_insufficient_items_rejected(self):
        items = corpus_from_phantoms(range(3))
        with pytest.raises(ValueError, match="at least 5"):
            table1_report(items, items, n=5, seed=0)

    def test_reports_are_deterministic(self):
        real = corpus_from_phantoms(range(10))
        sim = corpus_from_phantoms(range(10), image_seed_offset=50)
        a = table1_report(real, sim, n=6, seed=3)
        b = table1_report(real, sim, n=6, seed=3)
        assert a.per_class == b.per_class
        ta = table2_report(real, n=6, seed=3)
        tb = table2_report(real, n=6, seed=3)
        assert ta.per_pair == tb.per_pair

    def test_table2_shared_constant_intensity_gives_zeros(self):
        items = []
        for s in range(6):
            mask, _ = synth_phantom(seed=s)
            items.append((PolarImage(np.full(mask.data.shape, 0.5)), mask))
        rep = table2_report(items, n=6, seed=0)
        for pair in CLASS_PAIRS:
            assert rep.per_pair[pair] == 0.0

    def test_table2_separated_classes_diverge(self):
        items = corpus_from_phantoms(range(6))
        rep = table2_report(items, n=6, seed=0)
        assert all(v > 0.1 for v in rep.per_pair.values())
        assert set(rep.per_pair) == set(CLASS_PAIRS)

    def test_text_and_csv_rendering(self, tmp_path):
        items = corpus_from_phantoms(range(6))
        t1 = table1_report(items, items, n=4, seed=0)
        t2 = table2_report(items, n=4, seed=0)
        text1 = table1_to_text({"stage2": t1})
        assert "lumen" in text1 and "stage2" in text1
        text2 = table2_to_text({"real": t2})
        assert "lum-med" in text2
        out = tmp_path / "t1.csv"
        table1_to_csv({"stage2": t1}, str(out))
        header = out.read_text().splitlines()[0]
        assert header == "source,lumen,media,externa,n_images,seed"


def cart_corpus(seed, n, value_lo=0.0, value_hi=1.0):
    rng = np.random.default_rng(seed)
    return [
        CartesianImage(rng.uniform(value_lo, value_hi, (32, 32))) for _ in range(n)
    ]


class TestVttExport:
    def test_files_and_manifest(self, tmp_path):
        real = cart_corpus(0, 8)
        sim = cart_corpus(1, 8)
        manifest = vtt_export(real, sim, n_pairs=5, seed=2, out_dir=str(tmp_path))
        assert len(manifest.pairs) == 5 and len(manifest.truth) == 5
        for pair in manifest.pairs:
            assert (tmp_path / f"pair_{pair.pair_id:04d}_L.png").exists()
            assert (tmp_path / f"pair_{pair.pair_id:04d}_R.png").exists()
        listing = (tmp_path / "pairs.csv").read_text()
        assert "real" not in listing.replace("real_side", "")
        key = load_vtt_key(str(tmp_path / "key.csv"))
        assert key == manifest.truth

    def test_truth_side_really_holds_the_real_image(self, tmp_path):
        real = [CartesianImage(np.full((16, 16), 0.9))] * 4
        sim = [CartesianImage(np.full((16, 16), 0.1))] * 4
        manifest = vtt_export(real, sim, n_pairs=4, seed=0, out_dir=str(tmp_path))
        for pair, side in zip(manifest.pairs, manifest.truth):
            path = pair.left if side == "L" else pair.right
            other = pair.right if side == "L" else pair.left
            assert read_png(path).mean() > 0.8
            assert read_png(other).mean() < 0.2

    def test_side_assignment_is_balanced(self, tmp_path):
        sides = []
        for seed in range(20):
            out = tmp_path / f"s{seed}"
            manifest = vtt_export(
                cart_corpus(seed, 20), cart_corpus(seed + 100, 20),
                n_pairs=20, seed=seed, out_dir=str(out),
            )
            sides.extend(manifest.truth)
        frac_left = sides.count("L") / len(sides)
        assert 0.4 < frac_left < 0.6

    def test_insufficient_corpus_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="need 5"):
            vtt_export(cart_corpus(0, 3), cart_corpus(1, 8), 5, 0, str(tmp_path))


class TestVttScore:
    def make_manifest(self, n=20, seed=0, tmp_path=None):
        out = str(tmp_path / "vtt") if tmp_path else None
        return vtt_export(cart_corpus(0, n), cart_corpus(1, n), n, seed, out)

    def test_all_correct(self, tmp_path):
        manifest = self.make_manifest(10, 0, tmp_path)
        score = vtt_score(manifest, list(manifest.truth))
        assert score.accuracy == 1.0
        assert score.n == 10

    def test_published_study_numbers(self):
        # 147 of 260 correct: accuracy just above chance
        lo, hi = wilson_interval(147, 260)
        assert 147 / 260 == pytest.approx(0.5654, abs=1e-4)
        assert lo == pytest.approx(0.504611, abs=1e-5)
        assert hi == pytest.approx(0.624254, abs=1e-5)
        assert lo > 0.5  # above chance, barely

    def test_wilson_interval_against_direct_formula(self):
        import math

        z = 1.959963984540054
        for correct, n in [(5, 10), (0, 7), (7, 7), (147, 260)]:
            phat = correct / n
            denom = 1 + z * z / n
            center = (phat + z * z / (2 * n)) / denom
            half = z * math.sqrt(phat * (1 - phat) / n + z**2 / (4 * n * n)) / denom
            lo, hi = wilson_interval(correct, n)
            assert lo == pytest.approx(center - half, abs=1e-12)
            assert hi == pytest.approx(center + half, abs=1e-12)

    def test_random_guessing_hovers_at_half(self, tmp_path):
        manifest = self.make_manifest(20, 1, tmp_path)
        rng = np.random.default_rng(5)
        accs = []
        for _ in range(10_000):
            responses = ["L" if rng.random() < 0.5 else "R" for _ in range(20)]
            accs.append(vtt_score(manifest, responses).accuracy)
        assert abs(np.mean(accs) - 0.5) < 0.02

    def test_response_validation(self, tmp_path):
        manifest = self.make_manifest(4, 2, tmp_path)
        with pytest.raises(ValueError, match="4 pairs"):
            vtt_score(manifest, ["L"] * 3)
        with pytest.raises(ValueError, match="'L' or 'R'"):
            vtt_score(manifest, ["L", "R", "X", "L"])
