import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_array_equal

from eggscan.exceptions import InvalidInputError
from eggscan.preprocess import (Preprocessor, enhance_contrast, nearest_rank_quantile, preprocess, read_png,
                                to_grayscale, write_png)

images = arrays(np.uint8, st.tuples(st.integers(1, 24), st.integers(1, 24)))


def stretch_oracle(img, low, high):
    """Direct transcription of the stretch rule, by sorting the pixels."""
    flat = np.sort(img.ravel())
    n = flat.size
    a = flat[max(1, int(np.ceil(low * n))) - 1]
    b = flat[max(1, int(np.ceil(high * n))) - 1]
    if a == b:
        return img
    out = np.empty(img.shape, dtype=np.uint8)
    for idx, v in np.ndenumerate(img):
        t = min(max((float(v) - a) / (float(b) - a), 0.0), 1.0)
        out[idx] = int(np.floor(255 * t + 0.5))
    return out


class TestGrayscale:
    def test_white_and_red(self):
        rgb = np.array([[[255, 255, 255], [255, 0, 0]]], dtype=np.uint8)
        assert_array_equal(to_grayscale(rgb), [[255, 76]])

    def test_green_and_blue(self):
        rgb = np.array([[[0, 255, 0], [0, 0, 255]]], dtype=np.uint8)
        # 0.587 * 255 = 149.685, 0.114 * 255 = 29.07
        assert_array_equal(to_grayscale(rgb), [[150, 29]])

    def test_single_channel_passthrough(self, rng):
        gray = rng.integers(0, 256, (7, 9)).astype(np.uint8)
        assert_array_equal(to_grayscale(gray), gray)
        assert_array_equal(to_grayscale(to_grayscale(gray)), gray)

    def test_rejects_two_channels(self):
        with pytest.raises(InvalidInputError):
            to_grayscale(np.zeros((4, 4, 2), dtype=np.uint8))

    def test_rejects_out_of_range_values(self):
        with pytest.raises(InvalidInputError):
            to_grayscale(np.full((2, 2), 300))


class TestNearestRank:
    def test_small_sample(self):
        values = np.array([5, 1, 4, 2, 3])
        assert nearest_rank_quantile(values, 0.0) == 1
        assert nearest_rank_quantile(values, 0.2) == 1
        assert nearest_rank_quantile(values, 0.21) == 2
        assert nearest_rank_quantile(values, 1.0) == 5


class TestContrast:
    def test_constant_image_unchanged(self):
        img = np.full((10, 12), 128, dtype=np.uint8)
        assert_array_equal(enhance_contrast(img), img)

    def test_two_values_span_full_range(self):
        img = np.array([[50, 200] * 8] * 4, dtype=np.uint8)
        out = enhance_contrast(img)
        assert_array_equal(out[img == 50], 0)
        assert_array_equal(out[img == 200], 255)

    def test_full_range_ramp_stays_close(self):
        ramp = np.repeat(np.arange(256, dtype=np.uint8), 40).reshape(40, 256)
        out = enhance_contrast(ramp)
        # quantiles land on 2 and 253; the clamped tails give the largest offset
        diff = np.abs(out.astype(int) - ramp.astype(int))
        assert diff.max() == 2
        assert_array_equal(enhance_contrast(ramp, 0.0, 1.0), ramp)

    def test_rejects_bad_fractions(self):
        img = np.zeros((3, 3), dtype=np.uint8)
        with pytest.raises(InvalidInputError):
            enhance_contrast(img, 0.5, 0.5)
        with pytest.raises(InvalidInputError):
            enhance_contrast(img, -0.1, 0.9)

    def test_rejects_rgb(self):
        with pytest.raises(InvalidInputError):
            enhance_contrast(np.zeros((3, 3, 3), dtype=np.uint8))

    @settings(max_examples=60, deadline=None)
    @given(images, st.sampled_from([(0.01, 0.99), (0.0, 1.0), (0.1, 0.6)]))
    def test_matches_sorting_oracle(self, img, fractions):
        assert_array_equal(enhance_contrast(img, *fractions), stretch_oracle(img, *fractions))

    @settings(max_examples=60, deadline=None)
    @given(images)
    def test_monotone(self, img):
        out = enhance_contrast(img)
        order = np.argsort(img.ravel(), kind="stable")
        assert np.all(np.diff(out.ravel()[order].astype(int)) >= 0)


def test_preprocess_chains_both_steps(rng):
    rgb = rng.integers(0, 256, (20, 30, 3)).astype(np.uint8)
    assert_array_equal(preprocess(rgb), enhance_contrast(to_grayscale(rgb)))
    assert_array_equal(Preprocessor().fit_transform([rgb])[0], preprocess(rgb))


def test_png_round_trip(tmp_path, rng):
    gray = rng.integers(0, 256, (11, 13)).astype(np.uint8)
    rgb = rng.integers(0, 256, (11, 13, 3)).astype(np.uint8)
    write_png(tmp_path / "g.png", gray)
    write_png(tmp_path / "c.png", rgb)
    assert_array_equal(read_png(tmp_path / "g.png"), gray)
    assert_array_equal(read_png(tmp_path / "c.png"), rgb)
    write_png(tmp_path / "g2.png", gray)
    assert (tmp_path / "g.png").read_bytes() == (tmp_path / "g2.png").read_bytes()
