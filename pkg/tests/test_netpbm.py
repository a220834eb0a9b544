import numpy as np
import pytest

from memo_edge.netpbm import read_netpbm, write_pgm, write_ppm


def test_pgm_round_trip(tmp_path):
    a = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    write_pgm(tmp_path / "a.pgm", a)
    np.testing.assert_array_equal(read_netpbm(tmp_path / "a.pgm"), a)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")


def test_ppm_round_trip(tmp_path):
    a = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", a)
    np.testing.assert_array_equal(read_netpbm(tmp_path / "a.ppm"), a)


def test_header_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n# max\n255\n\x07\x08")
    np.testing.assert_array_equal(read_netpbm(tmp_path / "c.pgm"), [[7, 8]])


def test_integer_input_is_cast(tmp_path):
    write_pgm(tmp_path / "i.pgm", np.array([[0, 255]], dtype=np.int64))
    np.testing.assert_array_equal(read_netpbm(tmp_path / "i.pgm"), [[0, 255]])


@pytest.mark.parametrize(
    "blob, message",
    [
        (b"P2\n1 1\n255\n0", "not a binary"),
        (b"P5\n2 2\n255\n\x00", "truncated pixel"),
        (b"P5\n2 2\n65535\n" + b"\x00" * 8, "maxval"),
        (b"P5\n2", "truncated header"),
        (b"P5\nx 2\n255\n", "malformed"),
    ],
)
def test_rejects_bad_files(tmp_path, blob, message):
    path = tmp_path / "bad.pgm"
    path.write_bytes(blob)
    with pytest.raises(ValueError, match=message):
        read_netpbm(path)


def test_rejects_bad_arrays(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "x.ppm", np.zeros((2, 2), np.uint8))
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2), np.float32))
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.full((2, 2), 300))


def test_missing_file_names_path(tmp_path):
    with pytest.raises(OSError, match="nope.pgm"):
        read_netpbm(tmp_path / "nope.pgm")
