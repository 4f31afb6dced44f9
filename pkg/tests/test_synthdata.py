import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fiqlab import synthdata
from fiqlab.errors import ConfigError, DomainError, FormatError
from fiqlab.rngstreams import rng_for


def small_cfg(**kw):
    base = dict(num_classes=6, samples_per_class=4, side=16,
                duplicate_class_fraction=0.5, pose_spread=0.5,
                degrade_fraction=0.0, seed=3)
    base.update(kw)
    return synthdata.SynthConfig(**base)


def checkerboard(side=24):
    img = np.indices((side, side)).sum(axis=0) % 2
    return img.astype(np.float64)


class TestConfig:
    def test_duplicate_fraction_gives_exact_count(self):
        cfg = synthdata.SynthConfig(num_classes=50, samples_per_class=2,
                                    duplicate_class_fraction=0.2)
        ds = synthdata.gen_dataset(cfg)
        assert int(ds.class_flags.sum()) == 10

    @pytest.mark.parametrize("kw", [
        {"num_classes": 1},
        {"samples_per_class": 1},
        {"duplicate_class_fraction": 1.5},
        {"degrade_fraction": -0.1},
        {"pose_spread": -1.0},
    ])
    def test_invalid_config_rejected(self, kw):
        with pytest.raises(ConfigError):
            small_cfg(**kw).validate()


class TestGenDataset:
    def test_zero_perturbation_case(self):
        ds = synthdata.gen_dataset(small_cfg(pose_spread=0.0,
                                             degrade_fraction=0.0))
        assert np.all(ds.degradation_level == 0.0)
        labels = ds.labels.astype(int)
        for c in range(ds.num_classes):
            rows = ds.images[labels == c]
            spread = np.abs(rows - rows[0]).max()
            if ds.class_flags[c] == synthdata.FLAG_NORMAL:
                assert spread == 0.0
            else:
                assert spread <= synthdata.DUPLICATE_PIXEL_TOL

    def test_same_seed_bit_identical(self):
        cfg = small_cfg(degrade_fraction=0.5)
        a = synthdata.gen_dataset(cfg)
        b = synthdata.gen_dataset(cfg)
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.degradation_level, b.degradation_level)
        assert np.array_equal(a.class_flags, b.class_flags)

    def test_pixels_stay_in_unit_interval(self):
        ds = synthdata.gen_dataset(small_cfg(degrade_fraction=0.8,
                                             pose_spread=1.5))
        assert ds.images.min() >= 0.0
        assert ds.images.max() <= 1.0

    def test_degradation_level_zero_iff_pristine(self):
        ds = synthdata.gen_dataset(small_cfg(num_classes=10,
                                             samples_per_class=8,
                                             degrade_fraction=0.5, seed=9))
        assert np.any(ds.degradation_level > 0)
        assert np.any(ds.degradation_level == 0)

    def test_duplicate_classes_stay_tight_after_degradation(self):
        ds = synthdata.gen_dataset(small_cfg(num_classes=10,
                                             samples_per_class=6,
                                             duplicate_class_fraction=1.0,
                                             degrade_fraction=1.0, seed=5))
        labels = ds.labels.astype(int)
        for c in range(ds.num_classes):
            rows = ds.images[labels == c]
            # identical degradation draws keep copies within ~gain*tol
            assert np.abs(rows - rows[0]).max() <= 2 * synthdata.DUPLICATE_PIXEL_TOL

    def test_duplicate_variance_below_normal_under_any_backbone(self):
        from fiqlab import backbone as bb
        from fiqlab import evalkit
        ds = synthdata.gen_dataset(small_cfg(num_classes=12,
                                             samples_per_class=8,
                                             duplicate_class_fraction=0.5,
                                             pose_spread=0.6, seed=11))
        model = bb.init_backbone(ds.side * ds.side, rng=rng_for(4, 99))
        var = evalkit.oracle_variance(ds, model)
        dup = ds.class_flags == synthdata.FLAG_DUPLICATE
        assert var[dup].mean() < var[~dup].mean()
        assert var[dup].max() < var[~dup].min()


class TestRescaleBlur:
    def test_identity_factor(self):
        img = rng_for(0, 1).uniform(0, 1, (24, 24))
        out = synthdata.rescale_blur(img, 1.0)
        assert np.array_equal(out, img)
        assert out is not img

    def test_constant_invariance(self):
        img = np.full((24, 24), 0.37)
        out = synthdata.rescale_blur(img, 0.4)
        np.testing.assert_allclose(out, 0.37, atol=1e-12)

    def test_checkerboard_variance_drops(self):
        img = checkerboard()
        out = synthdata.rescale_blur(img, 0.5)
        assert out.var() < img.var()

    def test_matches_reference_resampler(self):
        # Independent oracle: direct box-overlap average then lerp.
        def reference(img, factor):
            side = img.shape[0]
            small = max(1, int(round(side * factor)))
            ratio = side / small
            down = np.zeros((small, small))
            for i in range(small):
                for j in range(small):
                    acc = 0.0
                    for y in range(side):
                        wy = max(0.0, min((i + 1) * ratio, y + 1) - max(i * ratio, y))
                        if wy == 0.0:
                            continue
                        for x in range(side):
                            wx = max(0.0, min((j + 1) * ratio, x + 1) - max(j * ratio, x))
                            if wx:
                                acc += wy * wx * img[y, x]
                    down[i, j] = acc / (ratio * ratio)
            scale = small / side
            out = np.zeros((side, side))
            for y in range(side):
                sy = min(max((y + 0.5) * scale - 0.5, 0.0), small - 1.0)
                y0 = int(np.floor(sy)); y1 = min(y0 + 1, small - 1); ty = sy - y0
                for x in range(side):
                    sx = min(max((x + 0.5) * scale - 0.5, 0.0), small - 1.0)
                    x0 = int(np.floor(sx)); x1 = min(x0 + 1, small - 1); tx = sx - x0
                    out[y, x] = ((1 - ty) * ((1 - tx) * down[y0, x0] + tx * down[y0, x1])
                                 + ty * ((1 - tx) * down[y1, x0] + tx * down[y1, x1]))
            return out

        img = rng_for(0, 2).uniform(0, 1, (12, 12))
        for factor in (0.5, 0.66, 0.3):
            got = synthdata.rescale_blur(img, factor)
            np.testing.assert_allclose(got, reference(img, factor), atol=1e-12)

    @pytest.mark.parametrize("factor", [0.0, -0.5, 1.5])
    def test_bad_factor(self, factor):
        with pytest.raises(DomainError):
            synthdata.rescale_blur(np.zeros((8, 8)), factor)


class TestRandomErase:
    def test_erased_pixels_exactly_zero_rest_untouched(self):
        img = rng_for(0, 3).uniform(0.2, 1.0, (24, 24))
        out = synthdata.random_erase(img, rng_for(0, 4))
        zeroed = out == 0.0
        assert zeroed.any()
        assert np.array_equal(out[~zeroed], img[~zeroed])

    def test_zero_fraction_within_decided_range(self):
        img = np.full((24, 24), 0.5)
        for draw in range(1000):
            out = synthdata.random_erase(img, rng_for(1, 5, draw))
            frac = np.mean(out == 0.0)
            assert 0.05 <= frac <= 0.30

    def test_rectangle_shape(self):
        img = np.ones((24, 24))
        out = synthdata.random_erase(img, rng_for(0, 6))
        rows = np.flatnonzero((out == 0).any(axis=1))
        cols = np.flatnonzero((out == 0).any(axis=0))
        block = out[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        assert np.all(block == 0.0)


class TestColorJitter:
    def test_identity_params(self):
        img = rng_for(0, 7).uniform(0, 1, (16, 16))
        np.testing.assert_array_equal(synthdata.jitter_affine(img, 1.0, 0.0), img)

    def test_output_clamped(self):
        img = rng_for(0, 8).uniform(0, 1, (16, 16))
        for draw in range(200):
            out = synthdata.color_jitter(img, rng_for(2, 9, draw))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_hand_evaluated_affine(self):
        img = np.full((8, 8), 0.5)
        out = synthdata.jitter_affine(img, 1.4, 0.2)
        np.testing.assert_allclose(out, 0.7, atol=1e-12)


class TestHflip:
    def test_forced_flip_involution(self):
        img = rng_for(0, 10).uniform(0, 1, (12, 12))
        assert np.array_equal(synthdata.flip_columns(synthdata.flip_columns(img)),
                              img)

    def test_symmetric_image_unchanged(self):
        img = rng_for(0, 11).uniform(0, 1, (12, 12))
        sym = 0.5 * (img + img[:, ::-1])
        assert np.allclose(synthdata.flip_columns(sym), sym)

    def test_single_pixel_index_map(self):
        side = 10
        img = np.zeros((side, side))
        img[3, 2] = 1.0
        out = synthdata.flip_columns(img)
        assert out[3, side - 1 - 2] == 1.0
        assert out.sum() == 1.0

    def test_probability_half(self):
        img = np.zeros((4, 4)); img[0, 0] = 1.0
        flips = sum(synthdata.hflip(img, rng_for(3, 12, d))[0, -1] == 1.0
                    for d in range(2000))
        assert 0.45 < flips / 2000 < 0.55


class TestAugment:
    def test_zero_probability_is_identity(self):
        img = rng_for(0, 13).uniform(0, 1, (24, 24))
        out = synthdata.augment(img, rng_for(0, 14), p=0.0)
        assert np.array_equal(out, img)
        assert out is not img

    def test_certainty_applies_all_three(self):
        img = rng_for(0, 15).uniform(0.3, 0.9, (24, 24))
        out = synthdata.augment(img, rng_for(0, 16), p=1.0)
        assert (out == 0.0).any()          # erase fired
        assert not np.array_equal(out, img)

    def test_no_augmentation_probability_matches_p_cubed(self):
        img = rng_for(0, 17).uniform(0.3, 0.9, (24, 24))
        unchanged = sum(
            np.array_equal(synthdata.augment(img, rng_for(4, 18, d), p=0.3), img)
            for d in range(4000))
        rate = unchanged / 4000
        assert abs(rate - 0.343) < 0.025

    @given(st.integers(min_value=0, max_value=10_000),
           st.floats(min_value=0.0, max_value=1.0))
    @settings(max_examples=40, deadline=None)
    def test_output_always_valid_image(self, draw, p):
        img = rng_for(5, 19).uniform(0, 1, (16, 16))
        out = synthdata.augment(img, rng_for(5, 20, draw), p=p)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestContainer:
    def test_round_trip(self, tmp_path):
        ds = synthdata.gen_dataset(small_cfg(degrade_fraction=0.4))
        path = tmp_path / "ds.bin"
        synthdata.save_dataset(ds, path)
        back = synthdata.load_dataset(path)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.degradation_level, ds.degradation_level)
        assert np.array_equal(back.class_flags, ds.class_flags)

    def test_save_twice_identical_bytes(self, tmp_path):
        ds = synthdata.gen_dataset(small_cfg())
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        synthdata.save_dataset(ds, p1)
        synthdata.save_dataset(ds, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_present(self, tmp_path):
        ds = synthdata.gen_dataset(small_cfg())
        path = tmp_path / "ds.bin"
        synthdata.save_dataset(ds, path)
        assert path.read_bytes()[:7] == b"IGFQDS1"

    def test_truncated_file_raises_format_error(self, tmp_path):
        ds = synthdata.gen_dataset(small_cfg())
        path = tmp_path / "ds.bin"
        synthdata.save_dataset(ds, path)
        raw = path.read_bytes()
        clipped = tmp_path / "clipped.bin"
        clipped.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(FormatError):
            synthdata.load_dataset(clipped)

    def test_bad_magic_raises(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(FormatError):
            synthdata.load_dataset(path)
