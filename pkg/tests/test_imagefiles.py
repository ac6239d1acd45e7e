"""PPM frame and PGM mask reader/writer behavior."""

import numpy as np
import pytest

from semvos import imagefiles
from semvos.errors import DataError


def test_ppm_roundtrip(tmp_path, rng):
    rgb = rng.integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    path = str(tmp_path / "f.ppm")
    imagefiles.write_ppm(path, rgb)
    assert np.array_equal(imagefiles.read_ppm(path), rgb)


def test_pgm_roundtrip(tmp_path, rng):
    gray = rng.integers(0, 4, size=(6, 4)).astype(np.uint8)
    path = str(tmp_path / "m.pgm")
    imagefiles.write_pgm(path, gray)
    assert np.array_equal(imagefiles.read_pgm(path), gray)


def test_writes_are_byte_deterministic(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    a, b = str(tmp_path / "a.ppm"), str(tmp_path / "b.ppm")
    imagefiles.write_ppm(a, img)
    imagefiles.write_ppm(b, img)
    assert open(a, "rb").read() == open(b, "rb").read()


def test_ppm_header_layout(tmp_path):
    path = str(tmp_path / "f.ppm")
    imagefiles.write_ppm(path, np.zeros((2, 3, 3), dtype=np.uint8))
    with open(path, "rb") as fh:
        assert fh.read().startswith(b"P6\n3 2\n255\n")


def test_comments_in_header_skipped(tmp_path):
    path = str(tmp_path / "c.pgm")
    with open(path, "wb") as fh:
        fh.write(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 1, 2, 3]))
    assert np.array_equal(imagefiles.read_pgm(path),
                          np.array([[0, 1], [2, 3]], dtype=np.uint8))


def test_wrong_magic(tmp_path):
    path = str(tmp_path / "f.ppm")
    with open(path, "wb") as fh:
        fh.write(b"P5\n1 1\n255\n\x00")
    with pytest.raises(DataError, match="P6"):
        imagefiles.read_ppm(path)


def test_truncated_pixels(tmp_path):
    path = str(tmp_path / "f.pgm")
    with open(path, "wb") as fh:
        fh.write(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(DataError, match="truncated"):
        imagefiles.read_pgm(path)


def test_unsupported_maxval(tmp_path):
    path = str(tmp_path / "f.pgm")
    with open(path, "wb") as fh:
        fh.write(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(DataError, match="maxval"):
        imagefiles.read_pgm(path)


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="cannot read"):
        imagefiles.read_ppm(str(tmp_path / "absent.ppm"))


def test_writer_shape_checks(tmp_path):
    with pytest.raises(DataError):
        imagefiles.write_ppm(str(tmp_path / "x.ppm"), np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(DataError):
        imagefiles.write_pgm(str(tmp_path / "x.pgm"), np.zeros((4, 4, 3), dtype=np.uint8))


def test_pgm_value_range_check(tmp_path):
    with pytest.raises(DataError, match="byte"):
        imagefiles.write_pgm(str(tmp_path / "x.pgm"), np.array([[300]]))
