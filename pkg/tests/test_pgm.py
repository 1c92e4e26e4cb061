import numpy as np
import pytest

from vitcomer.pgm import ImageError, image_to_input, normalize, pattern, read_pnm, write_pgm


def test_header_is_exact(tmp_path):
    px = np.arange(12, dtype=np.uint8).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", px)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n") and raw[len(b"P5\n4 3\n255\n"):] == px.tobytes()


def test_zero_range_maps_to_mid_gray():
    assert np.array_equal(normalize(np.full((2, 3), -4.2)), np.full((2, 3), 128, dtype=np.uint8))


def test_min_max_scaling():
    out = normalize(np.array([[1.0, 2.0], [3.0, 5.0]]))
    assert out.min() == 0 and out.max() == 255 and out[0, 1] == 64


def test_read_back_p5_and_p6(tmp_path, rng):
    px = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    write_pgm(tmp_path / "g.pgm", px)
    assert np.array_equal(read_pnm(tmp_path / "g.pgm"), px)
    rgb = rng.integers(0, 256, (4, 3, 3), dtype=np.uint8)
    (tmp_path / "c.ppm").write_bytes(b"P6\n# comment\n3 4\n255\n" + rgb.tobytes())
    assert np.array_equal(read_pnm(tmp_path / "c.ppm"), rgb)


def test_low_maxval_is_rescaled(tmp_path):
    (tmp_path / "m.pgm").write_bytes(b"P5 2 1 15\n" + bytes([0, 15]))
    assert read_pnm(tmp_path / "m.pgm").tolist() == [[0, 255]]


@pytest.mark.parametrize("raw", [b"P2\n1 1\n255\n0", b"P5\n4 4\n255\n\0", b"P5\n1 1\n65535\n\0\0", b"P5\n"])
def test_bad_files(tmp_path, raw):
    (tmp_path / "x.pgm").write_bytes(raw)
    with pytest.raises(ImageError):
        read_pnm(tmp_path / "x.pgm")


def test_writer_rejects_float():
    with pytest.raises(ImageError):
        write_pgm("unused.pgm", np.zeros((2, 2)))


def test_input_conversion():
    gray = np.array([[0, 255]], dtype=np.uint8)
    x = image_to_input(gray)
    assert x.shape == (3, 1, 2) and x[0, 0, 0] == -2.0 and x[2, 0, 1] == 2.0


@pytest.mark.parametrize("name", ["shapes", "constant", "gradient", "checker"])
def test_patterns(name):
    x = pattern(name, 64, 96)
    assert x.shape == (3, 64, 96)
    assert np.array_equal(x, pattern(name, 64, 96))


def test_unknown_pattern():
    with pytest.raises(ImageError):
        pattern("plasma", 64, 64)
