import math

import numpy as np
import pytest

from unshadow.imaging import (
    ImageBuffer,
    ImageError,
    MaskImage,
    channelwise_median,
    exp_transform,
    gaussian_pyramid,
    log_transform,
    read_pfm,
    read_png_mask,
    spatial_gradient,
    write_pfm,
    write_pfm_depth,
    write_png_mask,
)


def const_image(h, w, c, value):
    return ImageBuffer(np.full((h, w, c), value, dtype=np.float32))


class TestLogTransform:
    def test_constant_one_maps_to_zero(self):
        out = log_transform(const_image(4, 4, 3, 1.0), floor=1e-4)
        assert np.all(out.data == 0.0)

    def test_zero_clamps_to_log_floor(self):
        out = log_transform(const_image(2, 2, 1, 0.0), floor=1e-4)
        assert np.allclose(out.data, math.log(1e-4), atol=1e-6)
        assert out.data[0, 0, 0] == pytest.approx(-9.2103, abs=1e-4)

    def test_exp_inverts_log(self):
        img = const_image(3, 5, 3, 0.5)
        back = exp_transform(log_transform(img))
        np.testing.assert_allclose(back.data, img.data, rtol=1e-6)

    def test_exp_log_identity_above_floor(self):
        rng = np.random.default_rng(0)
        img = ImageBuffer(rng.uniform(1e-3, 10.0, (8, 8, 3)).astype(np.float32))
        back = exp_transform(log_transform(img))
        np.testing.assert_allclose(back.data, img.data, rtol=1e-5)

    def test_rejects_non_finite_with_diagnostics(self):
        data = np.ones((4, 4, 1), dtype=np.float32)
        data[2, 3, 0] = np.inf
        with pytest.raises(ImageError, match="y=2 x=3"):
            log_transform(ImageBuffer(data))


class TestGaussianPyramid:
    def test_constant_preserved_across_levels(self):
        levels = gaussian_pyramid(const_image(8, 8, 3, 0.7), 4)
        assert len(levels) == 4
        for lv in levels:
            np.testing.assert_allclose(lv.data, 0.7, rtol=1e-6)

    def test_size_recurrence(self):
        levels = gaussian_pyramid(const_image(8, 8, 1, 0.0), 4)
        assert [(l.height, l.width) for l in levels] == [(8, 8), (4, 4), (2, 2), (1, 1)]

    def test_delta_matches_direct_convolution(self):
        # Independent oracle: blur an 8x8 delta by the explicit separable
        # binomial kernel with edge-clamped indexing, then decimate.
        img = np.zeros((8, 8, 1), dtype=np.float32)
        img[4, 4, 0] = 1.0
        k = np.array([1, 4, 6, 4, 1], dtype=np.float64) / 16.0
        ref = np.zeros((8, 8))
        for y in range(8):
            for x in range(8):
                acc = 0.0
                for dy in range(-2, 3):
                    for dx in range(-2, 3):
                        yy = min(max(y + dy, 0), 7)
                        xx = min(max(x + dx, 0), 7)
                        acc += k[dy + 2] * k[dx + 2] * img[yy, xx, 0]
                ref[y, x] = acc
        lvl1 = gaussian_pyramid(ImageBuffer(img), 2)[1]
        np.testing.assert_allclose(lvl1.data[:, :, 0], ref[::2, ::2], atol=1e-6)

    def test_too_small_rejected(self):
        with pytest.raises(ImageError):
            gaussian_pyramid(const_image(4, 4, 1, 0.0), 4)


class TestSpatialGradient:
    def test_constant_is_zero(self):
        g = spatial_gradient(const_image(5, 5, 3, 2.5))
        assert np.all(g.data == 0.0)
        assert g.channels == 6

    def test_horizontal_ramp(self):
        w = 8
        ramp = np.tile(np.arange(w, dtype=np.float32) / w, (4, 1))[:, :, None]
        g = spatial_gradient(ImageBuffer(ramp))
        np.testing.assert_allclose(g.data[:, :-1, 0], 1.0 / w, atol=1e-6)
        assert np.all(g.data[:, :, 1] == 0.0)

    def test_matches_bruteforce_differences(self):
        rng = np.random.default_rng(1)
        img = rng.normal(size=(4, 4, 3)).astype(np.float32)
        g = spatial_gradient(ImageBuffer(img))
        for y in range(4):
            for x in range(4):
                for c in range(3):
                    ex = img[y, x + 1, c] - img[y, x, c] if x < 3 else 0.0
                    ey = img[y + 1, x, c] - img[y, x, c] if y < 3 else 0.0
                    assert g.data[y, x, c] == pytest.approx(ex, abs=1e-6)
                    assert g.data[y, x, 3 + c] == pytest.approx(ey, abs=1e-6)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(6, 6, 3)).astype(np.float32)
        b = rng.normal(size=(6, 6, 3)).astype(np.float32)
        ga = spatial_gradient(ImageBuffer(a)).data
        gb = spatial_gradient(ImageBuffer(b)).data
        gc = spatial_gradient(ImageBuffer(2.0 * a + 0.5 * b)).data
        np.testing.assert_allclose(gc, 2.0 * ga + 0.5 * gb, atol=1e-5)


class TestChannelwiseMedian:
    def test_odd_count(self):
        img = ImageBuffer(np.array([[1.0, 2.0, 3.0]], dtype=np.float32)[:, :, None])
        med = channelwise_median(img, MaskImage(np.ones((1, 3), dtype=np.float32)))
        assert med[0] == 2.0

    def test_even_count_midpoint(self):
        img = ImageBuffer(np.array([[1.0, 2.0, 3.0, 10.0]], dtype=np.float32)[:, :, None])
        med = channelwise_median(img, MaskImage(np.ones((1, 4), dtype=np.float32)))
        assert med[0] == 2.5

    def test_matches_sort_oracle_under_random_mask(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        mask = (rng.uniform(size=(16, 16)) < 0.5).astype(np.float32)
        mask[0, 0] = 1.0
        med = channelwise_median(ImageBuffer(img), MaskImage(mask))
        for c in range(3):
            vals = np.sort(img[:, :, c][mask > 0.5])
            n = len(vals)
            ref = vals[n // 2] if n % 2 else 0.5 * (vals[n // 2 - 1] + vals[n // 2])
            assert med[c] == pytest.approx(ref, abs=1e-7)

    def test_empty_mask_rejected(self):
        img = const_image(2, 2, 1, 1.0)
        with pytest.raises(ImageError):
            channelwise_median(img, MaskImage(np.zeros((2, 2), dtype=np.float32)))


class TestFileIO:
    def test_pfm_round_trip_exact(self, tmp_path):
        data = np.array([[0.0, 0.5], [1.0, 2.0]], dtype=np.float32)[:, :, None]
        p = tmp_path / "img.pfm"
        write_pfm(p, ImageBuffer(data))
        back = read_pfm(p)
        assert np.array_equal(back.data, data)

    def test_pfm_rgb_round_trip_random(self, tmp_path):
        rng = np.random.default_rng(4)
        data = rng.uniform(0, 100, (7, 5, 3)).astype(np.float32)
        p = tmp_path / "img.pfm"
        write_pfm(p, ImageBuffer(data))
        assert np.array_equal(read_pfm(p).data, data)

    def test_depth_inf_round_trip(self, tmp_path):
        data = np.array([[1.0, np.inf], [3.0, 4.0]], dtype=np.float32)[:, :, None]
        p = tmp_path / "d.pfm"
        write_pfm_depth(p, ImageBuffer(data))
        assert np.array_equal(read_pfm(p).data, data)

    def test_grayscale_header_with_rgb_data_rejected(self, tmp_path):
        p = tmp_path / "bad.pfm"
        payload = np.zeros(2 * 2 * 3, dtype="<f4").tobytes()
        p.write_bytes(b"Pf\n2 2\n-1.0\n" + payload[: 2 * 2 * 4 - 4])
        with pytest.raises(ImageError, match="truncated"):
            read_pfm(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.pfm"
        p.write_bytes(b"P6\n2 2\n-1.0\n" + b"\x00" * 16)
        with pytest.raises(ImageError, match="magic"):
            read_pfm(p)

    def test_mask_round_trip(self, tmp_path):
        mask = MaskImage(np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32))
        p = tmp_path / "m.png"
        write_png_mask(p, mask)
        back = read_png_mask(p)
        assert np.array_equal(back.data, mask.data)
        import PIL.Image

        with PIL.Image.open(p) as im:
            assert np.asarray(im).ravel().tolist() == [0, 255, 255, 0]

    def test_buffer_invariants(self):
        with pytest.raises(ImageError):
            ImageBuffer(np.full((2, 2, 4), 1.0, dtype=np.float32))
        with pytest.raises(ImageError):
            ImageBuffer(np.array([[[np.nan]]], dtype=np.float32))
        with pytest.raises(ImageError):
            MaskImage(np.array([[1.5]], dtype=np.float32))
