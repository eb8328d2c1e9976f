import numpy as np
import pytest

from mdrg.imageio import (
    ImageFormatError,
    check_image,
    load_png,
    load_raw,
    png_bytes,
    save_png,
    save_raw,
    to_uint8,
)


def _grid_image(rng, size=16):
    # values on the 8-bit grid so file round trips are exact
    return np.round(rng.random((size, size, 3)) * 255.0) / 255.0


def test_png_round_trip_exact(tmp_path, rng):
    img = _grid_image(rng)
    path = str(tmp_path / "x.png")
    save_png(path, img)
    assert np.array_equal(load_png(path), img)


def test_png_bytes_decodable(rng):
    data = png_bytes(_grid_image(rng))
    assert data[:8] == b"\x89PNG\r\n\x1a\n"


def test_raw_round_trip_exact(tmp_path, rng):
    img = _grid_image(rng, size=8)
    path = str(tmp_path / "x.mdim")
    save_raw(path, img)
    assert np.array_equal(load_raw(path), img)


def test_raw_header_layout(tmp_path, rng):
    img = _grid_image(rng, size=8)
    path = str(tmp_path / "x.mdim")
    save_raw(path, img)
    raw = open(path, "rb").read()
    assert raw[:4] == b"MDIM"
    assert int.from_bytes(raw[4:8], "little") == 8
    assert int.from_bytes(raw[8:12], "little") == 8
    assert len(raw) == 12 + 8 * 8 * 3


def test_raw_bad_magic(tmp_path, rng):
    path = str(tmp_path / "x.mdim")
    save_raw(path, _grid_image(rng, 8))
    raw = bytearray(open(path, "rb").read())
    raw[:4] = b"XXXX"
    open(path, "wb").write(bytes(raw))
    with pytest.raises(ImageFormatError, match="magic"):
        load_raw(path)


def test_raw_truncated(tmp_path, rng):
    path = str(tmp_path / "x.mdim")
    save_raw(path, _grid_image(rng, 8))
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:-5])
    with pytest.raises(ImageFormatError):
        load_raw(path)


def test_check_image_rejects_bad_inputs():
    with pytest.raises(ImageFormatError):
        check_image(np.zeros((4, 4)))
    with pytest.raises(ImageFormatError):
        check_image(np.full((4, 4, 3), 1.5))
    bad = np.zeros((4, 4, 3))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ImageFormatError):
        check_image(bad)


def test_to_uint8_rounding():
    img = np.zeros((1, 1, 3))
    img[0, 0] = [0.0, 0.5, 1.0]
    assert to_uint8(img).tolist() == [[[0, 128, 255]]]
