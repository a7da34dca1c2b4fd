import math

import numpy as np
import pytest

import mcf
from mcf.channels import (GRAD_NORM_CONST, GRAD_NORM_RADIUS, PyramidSpec,
                          block_average, build_pyramid, compute_l1,
                          gradient_channels, pyramid_scales, rgb_to_luv,
                          triangle_filter)
from mcf.errors import ConfigError, InvalidInputError

# ---------------------------------------------------------------------------
# independent oracles


def luv_oracle(r, g, b):
    """Scalar step-by-step sRGB -> XYZ (D65) -> LUV -> [0,1] rescale."""
    def lin(c):
        return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4
    rl, gl, bl = lin(r), lin(g), lin(b)
    x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl
    y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl
    z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl
    xn, yn, zn = 0.95047, 1.0, 1.08883
    eps, kappa = 216 / 24389, 24389 / 27
    yr = y / yn
    lstar = 116 * yr ** (1 / 3) - 16 if yr > eps else kappa * yr
    dn = x + 15 * y + 3 * z
    un = 4 * xn / (xn + 15 * yn + 3 * zn)
    vn = 9 * yn / (xn + 15 * yn + 3 * zn)
    up, vp = (4 * x / dn, 9 * y / dn) if dn > 0 else (un, vn)
    u = 13 * lstar * (up - un)
    v = 13 * lstar * (vp - vn)
    return lstar / 100.0, (u + 134.0) / 354.0, (v + 140.0) / 262.0


def tri_filter_oracle(plane, radius):
    """Direct 2D triangle convolution with replicated borders."""
    k1 = np.array(list(range(1, radius + 2)) + list(range(radius, 0, -1)),
                  dtype=np.float64)
    k1 /= (radius + 1) ** 2
    k2 = np.outer(k1, k1)
    h, w = plane.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            s = 0.0
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    s += k2[dy + radius, dx + radius] * plane[yy, xx]
            out[y, x] = s
    return out


def gradient_oracle(img):
    """Per-pixel centered differences, plane of max magnitude, two-bin
    linear interpolation; a from-scratch twin of gradient_channels."""
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape
    gx = np.zeros((3, h, w))
    gy = np.zeros((3, h, w))
    for p in range(3):
        for y in range(h):
            for x in range(w):
                x0, x1 = max(x - 1, 0), min(x + 1, w - 1)
                y0, y1 = max(y - 1, 0), min(y + 1, h - 1)
                gx[p, y, x] = img[p, y, x1] - img[p, y, x0]
                gy[p, y, x] = img[p, y1, x] - img[p, y0, x]
    mag = np.zeros((h, w))
    theta = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            m2 = [gx[p, y, x] ** 2 + gy[p, y, x] ** 2 for p in range(3)]
            p = int(np.argmax(m2))
            mag[y, x] = math.sqrt(m2[p])
            t = math.atan2(gy[p, y, x], gx[p, y, x])
            if t < 0:
                t += math.pi
            if t >= math.pi:
                t -= math.pi
            theta[y, x] = t
    norm = mag / (tri_filter_oracle(mag, GRAD_NORM_RADIUS) + GRAD_NORM_CONST)
    out = np.zeros((7, h, w))
    out[0] = norm
    for y in range(h):
        for x in range(w):
            u = theta[y, x] * 6.0 / math.pi
            b0 = min(int(math.floor(u)), 5)
            frac = min(max(u - b0, 0.0), 1.0)
            out[1 + b0, y, x] += norm[y, x] * (1.0 - frac)
            out[1 + (b0 + 1) % 6, y, x] += norm[y, x] * frac
    return out


# ---------------------------------------------------------------------------
# color channels


class TestLuv:
    def test_black_l_zero(self):
        img = np.zeros((3, 4, 5), dtype=np.float32)
        st = rgb_to_luv(img)
        assert np.all(st.data[0] == 0.0)

    def test_white_l_max(self):
        img = np.ones((3, 4, 5), dtype=np.float32)
        st = rgb_to_luv(img)
        assert np.all(st.data[0] >= 0.9999)

    def test_single_pixel_against_oracle(self):
        img = np.zeros((3, 1, 1), dtype=np.float32)
        img[:, 0, 0] = (0.5, 0.25, 0.75)
        st = rgb_to_luv(img)
        expect = luv_oracle(0.5, 0.25, 0.75)
        # frozen oracle values for (0.5, 0.25, 0.75)
        assert expect == pytest.approx(
            (0.41155325344049026, 0.4247764747888707, 0.20336251813128872),
            abs=1e-12)
        assert st.data[:, 0, 0] == pytest.approx(expect, abs=1e-6)

    def test_random_pixels_against_oracle(self, rng):
        img = rng.random((3, 6, 7)).astype(np.float32)
        st = rgb_to_luv(img)
        for y in range(6):
            for x in range(7):
                expect = luv_oracle(*(float(img[p, y, x]) for p in range(3)))
                assert st.data[:, y, x] == pytest.approx(expect, abs=1e-5)

    def test_rejects_nonfinite(self):
        img = np.zeros((3, 2, 2), dtype=np.float32)
        img[1, 1, 1] = np.nan
        with pytest.raises(InvalidInputError):
            rgb_to_luv(img)

    def test_range(self, rng):
        img = rng.random((3, 16, 16)).astype(np.float32)
        st = rgb_to_luv(img)
        assert st.data.min() >= 0.0 and st.data.max() <= 1.0


# ---------------------------------------------------------------------------
# gradient channels


class TestGradients:
    def test_constant_image_all_zero(self):
        img = np.full((3, 8, 8), 0.3, dtype=np.float32)
        st = gradient_channels(img)
        assert np.all(st.data == 0.0)

    def test_horizontal_ramp_single_bin(self):
        # gradient points along +x: orientation 0, all energy in bin 0
        ramp = np.tile(np.linspace(0.0, 1.0, 16, dtype=np.float32), (16, 1))
        img = np.stack([ramp] * 3)
        st = gradient_channels(img)
        assert np.all(st.data[1][st.data[0] > 0] > 0)
        for b in range(2, 7):
            assert np.all(st.data[b] == 0.0)

    def test_bright_pixel_against_oracle(self, rng):
        img = np.full((3, 5, 5), 0.2, dtype=np.float32)
        img[:, 2, 3] = 0.9
        st = gradient_channels(img)
        expect = gradient_oracle(img)
        np.testing.assert_allclose(st.data, expect.astype(np.float32),
                                   rtol=0, atol=1e-6)

    def test_random_image_against_oracle(self, rng):
        img = rng.random((3, 7, 6)).astype(np.float32)
        st = gradient_channels(img)
        np.testing.assert_allclose(st.data, gradient_oracle(img), atol=1e-6)

    def test_nonnegative(self, rng):
        img = rng.random((3, 12, 12)).astype(np.float32)
        st = gradient_channels(img)
        assert st.data.min() >= 0.0

    def test_orientation_mass_conservation(self, rng):
        # the 6 orientation channels sum to the normalized magnitude
        img = rng.random((3, 20, 14)).astype(np.float32)
        st = gradient_channels(img).data.astype(np.float64)
        total = st[1:].sum(axis=0)
        np.testing.assert_allclose(total, st[0], rtol=1e-5, atol=1e-7)

    def test_rotation_permutes_bins(self, rng):
        # 90-degree rotation moves energy from bin k to bin (k+3) % 6
        base = rng.random((3, 33, 33)).astype(np.float64)
        yy, xx = np.mgrid[0:33, 0:33]
        mask = ((yy - 16) ** 2 + (xx - 16) ** 2) < 13 ** 2
        img = (base * mask).astype(np.float32)
        rot = np.ascontiguousarray(np.rot90(img, axes=(1, 2)))
        e = gradient_channels(img).data[1:].sum(axis=(1, 2))
        er = gradient_channels(rot).data[1:].sum(axis=(1, 2))
        for k in range(6):
            assert er[(k + 3) % 6] == pytest.approx(e[k], rel=0.02)


# ---------------------------------------------------------------------------
# aggregation and the pyramid


class TestComputeL1:
    def test_model_window_geometry(self, rng):
        img = rng.random((3, 128, 64)).astype(np.float32)
        st = compute_l1(img, shrink=4)
        assert st.data.shape == (10, 32, 16)

    def test_constant_image(self):
        img = np.full((3, 32, 32), 0.5, dtype=np.float32)
        st = compute_l1(img, shrink=4)
        luv = st.data[:3]
        assert np.allclose(luv, luv[:, :1, :1], atol=1e-6)
        assert np.all(st.data[3:] == 0.0)

    def test_block_average_against_oracle(self, rng):
        plane = rng.random((16, 16))
        out = block_average(plane, 2)
        for by in range(8):
            for bx in range(8):
                expect = plane[2 * by:2 * by + 2, 2 * bx:2 * bx + 2].mean()
                assert out[by, bx] == pytest.approx(expect, abs=1e-12)

    def test_shrink_conserves_mass(self, rng):
        plane = rng.random((1, 32, 48))
        for s in (2, 4):
            shrunk = block_average(plane, s)
            assert shrunk.sum() * s * s == pytest.approx(plane.sum(), rel=1e-4)

    def test_bad_shrink(self, rng):
        with pytest.raises(ConfigError):
            compute_l1(rng.random((3, 16, 16)).astype(np.float32), shrink=3)

    def test_padding_rule(self, rng):
        img = rng.random((3, 130, 70)).astype(np.float32)
        st = compute_l1(img, shrink=4)
        assert st.data.shape == (10, 33, 18)

    def test_deterministic(self, rng):
        img = rng.random((3, 40, 40)).astype(np.float32)
        a = compute_l1(img, 4).data
        b = compute_l1(img.copy(), 4).data
        assert np.array_equal(a, b)

    def test_triangle_filter_matches_oracle(self, rng):
        plane = rng.random((9, 11))
        for r in (1, 2):
            np.testing.assert_allclose(triangle_filter(plane, r),
                                       tri_filter_oracle(plane, r), atol=1e-12)


class TestPyramid:
    def test_scales_strictly_decreasing(self):
        spec = PyramidSpec(scales_per_octave=8, shrink=4)
        scales = pyramid_scales(512, 512, spec)
        assert all(a > b for a, b in zip(scales, scales[1:]))
        assert scales[0] == 1.0

    def test_covers_down_to_model_window(self, rng):
        img = rng.random((3, 256, 128)).astype(np.float32)
        spec = PyramidSpec(scales_per_octave=4, shrink=4)
        levels = build_pyramid(img, spec)
        last = levels[-1]
        assert last.image.shape[1] >= 128 and last.image.shape[2] >= 64
        # one octave below the last scale would violate the window
        assert int(round(256 * levels[-1].scale * 2 ** (-1 / 4))) < 128 or \
            int(round(128 * levels[-1].scale * 2 ** (-1 / 4))) < 64

    def test_small_image_empty(self, rng):
        img = rng.random((3, 100, 100)).astype(np.float32)
        assert build_pyramid(img, PyramidSpec()) == []

    def test_worker_count_invariant(self, rng):
        img = rng.random((3, 200, 160)).astype(np.float32)
        spec = PyramidSpec(scales_per_octave=3, shrink=4)
        a = build_pyramid(img, spec, workers=1)
        b = build_pyramid(img, spec, workers=4)
        assert [lv.scale for lv in a] == [lv.scale for lv in b]
        for la, lb in zip(a, b):
            assert np.array_equal(la.channels.data, lb.channels.data)
