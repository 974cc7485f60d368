from __future__ import annotations

import numpy as np
import pytest

from surgrecon.io import (
    IngestionError, read_pfm, read_pgm, read_ply, read_ppm, write_pfm, write_pgm, write_ply,
    write_ppm,
)


def test_ppm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_pgm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(4, 9), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_pnm_header_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n# depth\n255\n\x01\xff")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[1, 255]]


@pytest.mark.parametrize("data,msg", [
    (b"P6\n2 2\n255\n\x00", "truncated"),
    (b"P6\n2 2\n65535\n" + b"\x00" * 24, "8-bit"),
    (b"P5\n2 2\n255\n" + b"\x00" * 4, "expected P6"),
])
def test_bad_ppm(tmp_path, data, msg):
    (tmp_path / "x.ppm").write_bytes(data)
    with pytest.raises(IngestionError, match=msg):
        read_ppm(tmp_path / "x.ppm")


def test_missing_file_named(tmp_path):
    with pytest.raises(IngestionError, match="nope.ppm"):
        read_ppm(tmp_path / "nope.ppm")


def test_pfm_round_trip_and_layout(tmp_path):
    img = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_pfm(tmp_path / "d.pfm", img)
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n3 2\n-1.0\n")
    # bottom row first, little endian
    assert np.frombuffer(raw[-24:], dtype="<f4").tolist() == [3, 4, 5, 0, 1, 2]
    assert np.array_equal(read_pfm(tmp_path / "d.pfm"), img)


def test_pfm_big_endian(tmp_path):
    img = np.array([[1.5, -2.0]], dtype=">f4")
    (tmp_path / "b.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + img.tobytes())
    assert read_pfm(tmp_path / "b.pfm").tolist() == [[1.5, -2.0]]


def test_ply_round_trip(tmp_path):
    cols = {"x": np.array([0.5, 1.25]), "n": np.array([3, 4])}
    write_ply(tmp_path / "p.ply", cols, {"x": ("float", "%.6f"), "n": ("int", "%d")})
    text = (tmp_path / "p.ply").read_text()
    assert text.splitlines()[:5] == ["ply", "format ascii 1.0", "element vertex 2", "property float x", "property int n"]
    back = read_ply(tmp_path / "p.ply")
    np.testing.assert_allclose(back["x"], cols["x"])
    np.testing.assert_allclose(back["n"], cols["n"])
