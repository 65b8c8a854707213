"""PPM / PGM codecs and palette rendering."""

import numpy as np
import pytest

from canseg.core.errors import ConfigError, ImageFormatError
from canseg.services import imageio


class TestPPM:
    """Binary P6 images."""

    def test_white_pixel_bytes(self):
        data = imageio.encode_ppm(np.full((1, 1, 3), 255, np.uint8))
        assert data == b"P6\n1 1\n255\n\xff\xff\xff"

    def test_round_trip(self, rng, tmp_path):
        image = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
        path = tmp_path / "x.ppm"
        imageio.write_ppm(path, image)
        np.testing.assert_array_equal(imageio.read_ppm(path), image)
        assert imageio.encode_ppm(imageio.read_ppm(path)) == path.read_bytes()

    def test_header_comments(self):
        data = b"P6\n# made by hand\n2 1\n255\n" + bytes(6)
        assert imageio.decode_ppm(data).shape == (1, 2, 3)

    def test_wrong_magic(self):
        with pytest.raises(ImageFormatError) as info:
            imageio.decode_ppm(b"P3\n1 1\n255\n000")
        assert info.value.offset == 0

    def test_short_payload(self):
        with pytest.raises(ImageFormatError, match="short payload"):
            imageio.decode_ppm(b"P6\n2 2\n255\n" + bytes(5))

    def test_maxval_must_be_255(self):
        with pytest.raises(ImageFormatError, match="maxval"):
            imageio.decode_ppm(b"P6\n1 1\n15\n" + bytes(3))

    def test_malformed_header_offset(self):
        with pytest.raises(ImageFormatError) as info:
            imageio.decode_ppm(b"P6\n1 x\n255\n" + bytes(3))
        assert info.value.offset == 5


class TestPGM:
    """Binary P5 label maps."""

    def test_round_trip(self, tmp_path):
        label = np.array([[0, 1, 2], [3, 255, 0]], dtype=np.uint8)
        path = tmp_path / "l.pgm"
        imageio.write_label_pgm(path, label)
        np.testing.assert_array_equal(imageio.read_pgm(path), label)

    def test_out_of_range(self):
        """The offset points at the first bad pixel in the encoded stream."""
        with pytest.raises(ImageFormatError) as info:
            imageio.encode_pgm(np.array([[0, 300]]))
        assert info.value.offset == len(b"P5\n2 1\n255\n") + 1


class TestPalette:
    """Colour maps for label images."""

    def test_three_classes_three_colours(self):
        label = np.array([[0, 1, 2], [2, 1, 0]])
        rendered = imageio.color_map(label, imageio.palette(3))
        assert len({tuple(c) for c in rendered.reshape(-1, 3)}) == 3

    def test_cityscapes_for_nineteen(self):
        np.testing.assert_array_equal(imageio.palette(19), imageio.CITYSCAPES_PALETTE)

    def test_ignored_pixels_black(self):
        rendered = imageio.color_map(np.array([[255]]), imageio.palette(4))
        assert tuple(rendered[0, 0]) == imageio.IGNORE_COLOUR

    def test_generated_palette_distinct(self):
        colours = imageio.palette(40)
        assert len({tuple(c) for c in colours}) == 40

    def test_float_conversions(self, rng):
        image = rng.integers(0, 256, size=(4, 6, 3), dtype=np.uint8)
        chw = imageio.to_chw_float(image)
        assert chw.shape == (1, 3, 4, 6)
        np.testing.assert_array_equal(imageio.to_hwc_uint8(chw), image)

    def test_palette_size_checked(self):
        with pytest.raises(ConfigError) as info:
            imageio.palette(0)
        assert info.value.path == "num_classes"
