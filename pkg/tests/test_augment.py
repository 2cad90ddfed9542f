import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dinosd.augment import (
    AUGMIX_OPS,
    CORRUPTIONS,
    SEVERITY_TABLE,
    AugMixSpec,
    CorruptionSpec,
    augmix,
    augmix_views,
    corrupt,
    denoise_wavelet,
    equalize_hist,
    haar2,
    ihaar2,
    preprocess_test,
    read_corruption_manifest,
    write_corruption_manifest,
)


def ramp(h=32, w=48):
    y, x = np.mgrid[0:h, 0:w]
    base = 0.15 + 0.7 * (x / (w - 1) * 0.6 + y / (h - 1) * 0.4)
    return np.stack([base, base * 0.9, 1.0 - base])


def photo(seed=0, h=32, w=48):
    rng = np.random.default_rng(seed)
    return np.clip(ramp(h, w) + rng.normal(0, 0.05, (3, h, w)), 0, 1)


class TestCorruptionSpec:
    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown corruption"):
            CorruptionSpec("snow", 1)

    @pytest.mark.parametrize("sev", [0, 6])
    def test_severity_range(self, sev):
        with pytest.raises(ValueError, match="severity"):
            CorruptionSpec("contrast", sev)

    def test_tables_have_five_levels(self):
        assert set(SEVERITY_TABLE) == set(CORRUPTIONS)
        assert all(len(v) == 5 for v in SEVERITY_TABLE.values())

    def test_manifest_round_trip(self, tmp_path):
        specs = [CorruptionSpec("gaussian_noise", 3, 11), CorruptionSpec("pixelate", 5, 0)]
        write_corruption_manifest(tmp_path / "c.json", specs)
        assert read_corruption_manifest(tmp_path / "c.json") == specs

    def test_manifest_must_be_array(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"kind": "contrast"}))
        with pytest.raises(ValueError, match="array"):
            read_corruption_manifest(tmp_path / "c.json")


class TestCorrupt:
    @pytest.mark.parametrize("sev", range(1, 6))
    def test_brightness_table(self, sev):
        out = corrupt(np.full((3, 4, 6), 0.5), CorruptionSpec("brightness", sev))
        np.testing.assert_allclose(out, min(1.0, 0.5 + 0.1 * sev), rtol=1e-14)

    def test_gaussian_variance_grows(self):
        img = np.full((3, 16, 16), 0.5)
        var = {s: np.mean([corrupt(img, CorruptionSpec("gaussian_noise", s, k)).var() for k in range(100)])
               for s in (1, 5)}
        assert var[5] > var[1]

    @pytest.mark.parametrize("kind", ["gaussian_noise", "shot_noise", "impulse_noise"])
    def test_noise_mse_monotone_in_severity(self, kind):
        img = ramp()
        mse = [np.mean([np.mean((corrupt(img, CorruptionSpec(kind, s, k)) - img) ** 2) for k in range(50)])
               for s in range(1, 6)]
        assert all(a <= b for a, b in zip(mse, mse[1:]))

    @pytest.mark.parametrize("sev", range(1, 6))
    def test_pixelate_idempotent(self, sev):
        spec = CorruptionSpec("pixelate", sev)
        once = corrupt(photo(sev, 30, 44), spec)
        np.testing.assert_array_equal(corrupt(once, spec), once)

    def test_contrast_keeps_mean(self):
        img = photo(1)
        out = corrupt(img, CorruptionSpec("contrast", 3))
        np.testing.assert_allclose(out.mean(axis=(1, 2)), img.mean(axis=(1, 2)), rtol=1e-12)
        assert out.std() < img.std()

    def test_impulse_fraction(self):
        img = np.full((3, 64, 64), 0.5)
        out = corrupt(img, CorruptionSpec("impulse_noise", 5, 2))
        hit = np.mean(out != 0.5)
        assert abs(hit - SEVERITY_TABLE["impulse_noise"][4]) < 0.02

    @pytest.mark.parametrize("kind", CORRUPTIONS)
    def test_deterministic_pure_and_in_range(self, kind):
        img = photo(2)
        before = img.copy()
        spec = CorruptionSpec(kind, 4, 9)
        a, b = corrupt(img, spec), corrupt(img, spec)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(img, before)
        assert a.min() >= 0.0 and a.max() <= 1.0
        assert a.shape == img.shape


class TestDenoise:
    def test_haar_is_orthonormal(self):
        x = np.random.default_rng(0).normal(size=(6, 8))
        bands = haar2(x)
        assert sum(np.sum(b**2) for b in bands) == pytest.approx(np.sum(x**2), rel=1e-13)
        np.testing.assert_allclose(ihaar2(*bands), x, atol=1e-14)

    def test_constant_fixed_point(self):
        img = np.full((3, 10, 12), 0.37)
        np.testing.assert_array_equal(denoise_wavelet(img), img)

    @pytest.mark.parametrize("shape", [(3, 16, 20), (3, 15, 21)])
    def test_zero_threshold_reconstructs(self, shape):
        img = np.random.default_rng(1).random(shape)
        np.testing.assert_allclose(denoise_wavelet(img, threshold=0.0), img, atol=1e-10)

    def test_reduces_noise(self):
        clean = ramp()
        before, after = [], []
        for seed in range(20):
            noisy = corrupt(clean, CorruptionSpec("gaussian_noise", 3, seed))
            before.append(np.mean((noisy - clean) ** 2))
            after.append(np.mean((denoise_wavelet(noisy) - clean) ** 2))
        assert np.mean(after) < np.mean(before)

    def test_universal_threshold_oracle(self):
        # on a zero image plus a single spike the only nonzero details come from the spike,
        # so median(|HH|) = 0 and the threshold is 0: output equals input
        img = np.zeros((1, 8, 8))
        img[0, 3, 3] = 0.8
        np.testing.assert_allclose(denoise_wavelet(img), img, atol=1e-15)


class TestEqualize:
    def test_uniform_histogram_nearly_fixed(self):
        levels = np.arange(256) / 255.0
        img = np.stack([np.tile(levels, (4, 1))] * 3)
        assert np.abs(equalize_hist(img) - img).max() <= 1 / 256

    def test_two_level_hand_case(self):
        img = np.full((3, 4, 4), 0.2)
        img[:, :, 2:] = 0.8
        out = equalize_hist(img)
        np.testing.assert_allclose(out[:, :, :2], 0.5)
        np.testing.assert_allclose(out[:, :, 2:], 1.0)

    def test_cdf_flatness(self):
        rng = np.random.default_rng(5)
        img = rng.beta(2.0, 2.0, (3, 256, 256))
        out = equalize_hist(img)
        grid = np.linspace(0, 1, 1001)
        for ch in out:
            flat = np.sort(ch.ravel())
            cdf = np.searchsorted(flat, grid, side="right") / flat.size
            assert np.abs(cdf - grid).max() <= 2 / 256

    def test_output_range(self):
        out = equalize_hist(photo(3))
        assert out.min() > 0.0 and out.max() == 1.0


class TestPreprocess:
    def test_composition(self):
        img = corrupt(photo(4), CorruptionSpec("shot_noise", 3, 1))
        np.testing.assert_array_equal(preprocess_test(img), equalize_hist(denoise_wavelet(img)))
        np.testing.assert_array_equal(
            preprocess_test(img, equalize_first=True), denoise_wavelet(equalize_hist(img))
        )

    def test_identity_when_disabled(self):
        img = photo(5)
        np.testing.assert_array_equal(preprocess_test(img, denoise=False, equalize=False), img)

    def test_single_flags(self):
        img = photo(6)
        np.testing.assert_array_equal(preprocess_test(img, equalize=False), denoise_wavelet(img))
        np.testing.assert_array_equal(preprocess_test(img, denoise=False), equalize_hist(img))


class TestAugMix:
    def test_deterministic(self):
        img = photo(7)
        np.testing.assert_array_equal(augmix(img, seed=3), augmix(img, seed=3))
        assert not np.array_equal(augmix(img, seed=3), augmix(img, seed=4))

    def test_skip_weight_one_is_identity(self):
        img = photo(8)
        np.testing.assert_array_equal(augmix(img, AugMixSpec(skip_weight=1.0), seed=1), img)

    def test_ops_disjoint_from_corruptions(self):
        assert not set(AUGMIX_OPS) & set(CORRUPTIONS)
        with pytest.raises(ValueError):
            AugMixSpec(ops=("rotate", "gaussian_noise"))

    @pytest.mark.parametrize("op", AUGMIX_OPS)
    def test_each_op_in_range(self, op):
        img = photo(9)
        out = augmix(img, AugMixSpec(ops=(op,), skip_weight=0.0), seed=2)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_views_get_distinct_seeds(self):
        views = np.stack([photo(10)] * 6)
        out = augmix_views(views, [0, 1])
        np.testing.assert_array_equal(out, augmix_views(views, [0, 1]))
        assert not np.array_equal(out[0], out[1])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_pure_and_bounded(self, seed):
        img = photo(seed % 7)
        before = img.copy()
        out = augmix(img, seed=seed)
        np.testing.assert_array_equal(img, before)
        assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.parametrize("text", ['[{"kind": "contrast", "level": 2}]', "[3]", "[{"])
def test_malformed_manifest_is_value_error(tmp_path, text):
    (tmp_path / "c.json").write_text(text)
    with pytest.raises(ValueError):
        read_corruption_manifest(tmp_path / "c.json")
