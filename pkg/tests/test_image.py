import numpy as np
import pytest

from mcf.errors import DataError, InvalidInputError
from mcf.image import (dump_channels, load_channels, load_image, load_ppm,
                       resample_box, resize_bilinear, save_ppm, validate_image)


class TestPpm:
    def test_roundtrip(self, tmp_path, rng):
        img = rng.random((3, 9, 13)).astype(np.float32)
        path = tmp_path / "x.ppm"
        save_ppm(path, img)
        back = load_ppm(path)
        assert back.shape == img.shape
        # 8-bit quantization: within half a step
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6

    def test_comments_in_header(self, tmp_path):
        raw = b"P6\n# a comment\n2 1\n# another\n255\n" + bytes(6)
        p = tmp_path / "c.ppm"
        p.write_bytes(raw)
        img = load_ppm(p)
        assert img.shape == (3, 1, 2)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ppm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(DataError):
            load_ppm(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.ppm"
        p.write_bytes(b"P6\n4 4\n255\n" + bytes(5))
        with pytest.raises(DataError):
            load_ppm(p)


def test_png_roundtrip(tmp_path, rng):
    from PIL import Image

    arr = (rng.random((5, 7, 3)) * 255).astype(np.uint8)
    path = tmp_path / "x.png"
    Image.fromarray(arr).save(path)
    img = load_image(str(path))
    assert img.shape == (3, 5, 7)
    np.testing.assert_allclose(img, arr.transpose(2, 0, 1) / 255.0, atol=1e-7)


class TestValidate:
    def test_shape(self):
        with pytest.raises(InvalidInputError):
            validate_image(np.zeros((2, 4, 4)))

    def test_range(self):
        with pytest.raises(InvalidInputError):
            validate_image(np.full((3, 2, 2), 1.5))

    def test_nan(self):
        img = np.zeros((3, 2, 2))
        img[0, 0, 0] = np.inf
        with pytest.raises(InvalidInputError):
            validate_image(img)


class TestResize:
    def test_identity(self, rng):
        img = rng.random((3, 8, 8)).astype(np.float32)
        assert np.array_equal(resize_bilinear(img, 8, 8), img)

    def test_constant_preserved(self):
        img = np.full((3, 10, 10), 0.25, dtype=np.float32)
        out = resize_bilinear(img, 7, 13)
        assert out.shape == (3, 7, 13)
        np.testing.assert_allclose(out, 0.25, atol=1e-7)

    def test_downsample_2x_matches_average_interior(self, rng):
        img = rng.random((1, 8, 8))
        out = resize_bilinear(img, 4, 4)
        # pixel centers of a 2x downsample land between 2x2 blocks
        expect = img[0].reshape(4, 2, 4, 2).mean(axis=(1, 3))
        np.testing.assert_allclose(out[0], expect, atol=1e-6)

    def test_resample_box_full_image(self, rng):
        img = rng.random((3, 12, 6)).astype(np.float32)
        out = resample_box(img, (0, 0, 6, 12), 12, 6)
        np.testing.assert_allclose(out, img, atol=1e-6)


def test_channel_dump_roundtrip(tmp_path, rng):
    planes = rng.standard_normal((5, 6, 7)).astype(np.float32)
    path = tmp_path / "x.mcfc"
    dump_channels(path, planes)
    back = load_channels(path)
    assert np.array_equal(back, planes)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError):
        load_channels(path)
