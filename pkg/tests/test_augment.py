from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invspread import rng
from invspread.augment import (
    CIFAR_MEAN,
    CIFAR_STD,
    AugmentConfig,
    augment,
    augment_batch,
    build_pair,
    normalize,
    plain_view,
    sample_crop_box,
)
from invspread.errors import ContractError
from invspread.imaging import resize_bilinear

OFF = AugmentConfig().disabled()


def random_image(seed=0, h=32, w=32):
    return np.random.default_rng(seed).integers(0, 256, size=(3, h, w), dtype=np.uint8)


def only(op, **kw):
    return AugmentConfig(**{f"enable_{o}": o == op for o in ("crop", "grayscale", "jitter", "flip")}, **kw)


class TestConfig:
    def test_defaults(self):
        cfg = AugmentConfig()
        assert cfg.crop_area_range == (0.2, 1.0)
        assert cfg.crop_aspect_range == (3 / 4, 4 / 3)
        assert cfg.grayscale_prob == 0.1
        assert cfg.jitter_strengths == (0.4, 0.4, 0.4)
        assert cfg.flip_prob == 0.5
        assert cfg.normalize_mean == CIFAR_MEAN and cfg.normalize_std == CIFAR_STD

    @pytest.mark.parametrize(
        "kw",
        [
            dict(crop_area_range=(0.0, 1.0)),
            dict(crop_area_range=(0.5, 0.4)),
            dict(crop_area_range=(0.5, 1.2)),
            dict(grayscale_prob=1.5),
            dict(flip_prob=-0.1),
            dict(normalize_std=(0.2, 0.0, 0.2)),
        ],
    )
    def test_invariants(self, kw):
        with pytest.raises(ContractError):
            AugmentConfig(**kw)

    def test_without_each_op(self):
        full = AugmentConfig()
        for op in ("crop", "grayscale", "jitter", "flip"):
            cfg = full.without(op)
            diff = [k for k, v in cfg.to_dict().items() if v != full.to_dict()[k]]
            assert diff == [f"enable_{op}"]
        with pytest.raises(ContractError):
            full.without("hue")


class TestAugment:
    def test_identity_when_disabled(self):
        img = random_image(1)
        np.testing.assert_array_equal(augment(img, OFF, 123), plain_view(img, OFF))

    def test_forced_flip(self):
        img = random_image(2)
        cfg = only("flip", flip_prob=0.5)
        seed = next(s for s in range(100) if rng.stream(s, "flip").random() < 0.5)
        out = augment(img, cfg, seed)
        np.testing.assert_array_equal(out, plain_view(img, cfg)[:, :, ::-1])
        np.testing.assert_array_equal(out[:, :, ::-1], plain_view(img, cfg))

    def test_flip_prob_one_and_zero(self):
        img = random_image(3)
        np.testing.assert_array_equal(augment(img, only("flip", flip_prob=1.0), 5), plain_view(img, OFF)[:, :, ::-1])
        np.testing.assert_array_equal(augment(img, only("flip", flip_prob=0.0), 5), plain_view(img, OFF))

    def test_forced_grayscale_2x2(self):
        img = np.array(
            [[[255, 0], [10, 200]], [[0, 255], [20, 100]], [[0, 0], [30, 50]]],
            dtype=np.uint8,
        )
        cfg = only("grayscale", grayscale_prob=1.0)
        out = augment(img, cfg, 0)
        w = (Fraction(299, 1000), Fraction(587, 1000), Fraction(114, 1000))
        for c in range(3):
            for i in range(2):
                for j in range(2):
                    luma = sum(w[k] * int(img[k, i, j]) for k in range(3)) / 255
                    want = (float(luma) - cfg.normalize_mean[c]) / cfg.normalize_std[c]
                    assert out[c, i, j] == pytest.approx(want, rel=1e-6, abs=1e-6)
        # with shared moments the three channels coincide
        same = only("grayscale", grayscale_prob=1.0, normalize_mean=(0.5,) * 3, normalize_std=(0.25,) * 3)
        out = augment(img, same, 0)
        np.testing.assert_array_equal(out[0], out[1])
        np.testing.assert_array_equal(out[1], out[2])

    def test_shape_and_finite(self):
        for s in range(20):
            out = augment(random_image(s), AugmentConfig(), s)
            assert out.shape == (3, 32, 32) and out.dtype == np.float32
            assert np.all(np.isfinite(out))

    def test_rejects_bad_shape(self):
        with pytest.raises(ContractError):
            augment(np.zeros((32, 32), np.uint8), OFF, 0)

    def test_removing_one_op_keeps_others_randomness(self):
        img = random_image(4)
        cfg = AugmentConfig(grayscale_prob=0.0, jitter_strengths=(0.0, 0.0, 0.0))
        no_flip = cfg.without("flip")
        for s in range(10):
            a, b = augment(img, cfg, s), augment(img, no_flip, s)
            assert np.array_equal(a, b) or np.array_equal(a, b[:, :, ::-1])

    def test_jitter_stays_in_range(self):
        cfg = only("jitter", normalize_mean=(0.0,) * 3, normalize_std=(1.0,) * 3)
        for s in range(20):
            out = augment(random_image(s), cfg, s)
            assert out.min() >= 0.0 and out.max() <= 1.0


class TestPairs:
    def test_disabled_pair_identical(self):
        a, b = build_pair(random_image(5), OFF, 1, 2)
        np.testing.assert_array_equal(a, b)

    def test_same_seed_identical(self):
        a, b = build_pair(random_image(5), AugmentConfig(), 9, 9)
        np.testing.assert_array_equal(a, b)

    def test_crop_only_distinct_seeds_differ(self):
        img = random_image(6)
        cfg = only("crop")
        differ = sum(not np.array_equal(*build_pair(img, cfg, 2 * s, 2 * s + 1)) for s in range(100))
        assert differ >= 99

    def test_batch_matches_single(self):
        imgs = np.stack([random_image(s) for s in range(4)])
        seeds = [11, 12, 13, 14]
        batch = augment_batch(imgs, AugmentConfig(), seeds)
        for k in range(4):
            np.testing.assert_array_equal(batch[k], augment(imgs[k], AugmentConfig(), seeds[k]))


class TestCrop:
    def test_full_box_resize_is_identity(self):
        img = np.random.default_rng(0).random((3, 32, 32))
        np.testing.assert_allclose(resize_bilinear(img, 32, 32, (0, 0, 32, 32)), img, atol=1e-12)

    def test_fallback_is_centre(self):
        # an area range no aspect draw can satisfy forces the fallback
        cfg = AugmentConfig(crop_area_range=(1.0, 1.0), crop_aspect_range=(2.0, 3.0))
        top, left, h, w = sample_crop_box(32, 32, cfg, np.random.default_rng(0))
        assert (top, left, h, w) == (8, 0, 16, 32)

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_box_inside_image(self, seed):
        top, left, h, w = sample_crop_box(32, 32, AugmentConfig(), np.random.default_rng(seed))
        assert 0 <= top and 0 <= left and h >= 1 and w >= 1
        assert top + h <= 32 and left + w <= 32


def test_normalize_formula():
    img = np.full((3, 2, 2), 0.5)
    out = normalize(img, AugmentConfig())
    for c in range(3):
        assert out[c, 0, 0] == pytest.approx((0.5 - CIFAR_MEAN[c]) / CIFAR_STD[c], rel=1e-6)
