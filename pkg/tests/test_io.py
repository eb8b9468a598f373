import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from foam import io as fio


@given(st.lists(st.integers(1, 5), min_size=0, max_size=4), st.integers(0, 1000))
def test_tensor_roundtrip(shape, seed):
    arr = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    back = fio.decode_tensor(fio.encode_tensor(arr))
    assert back.shape == arr.shape and back.dtype == np.float32
    assert back.tobytes() == arr.tobytes()


def test_tensor_header_layout():
    buf = fio.encode_tensor(np.ones((2, 3), dtype=np.float32))
    assert buf[:8] == b"FOAMTNSR"
    assert len(buf) == 8 + 4 + 2 * 4 + 6 * 4


def test_tensor_decode_errors():
    buf = fio.encode_tensor(np.ones((2, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="magic"):
        fio.decode_tensor(b"XXXXXXXX" + buf[8:])
    with pytest.raises(ValueError, match="payload"):
        fio.decode_tensor(buf[:-4])


def test_pgm_roundtrip_keeps_whitespace_valued_pixels(tmp_path):
    # bytes 9-13 and 32 are ASCII whitespace; the reader must not treat them as header separators
    img = np.array([[9, 10, 11, 12], [13, 32, 0, 255]], dtype=np.float64)
    fio.write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(fio.read_pgm(tmp_path / "a.pgm"), img.astype(np.uint8))
    full = np.arange(256, dtype=np.float64).reshape(16, 16)
    fio.write_pgm(tmp_path / "b.pgm", full)
    np.testing.assert_array_equal(fio.read_pgm(tmp_path / "b.pgm"), full)


def test_pgm_clips_and_rejects_bad_input(tmp_path):
    fio.write_pgm(tmp_path / "c.pgm", np.array([[-5.0, 300.0]]))
    np.testing.assert_array_equal(fio.read_pgm(tmp_path / "c.pgm"), [[0, 255]])
    with pytest.raises(ValueError):
        fio.write_pgm(tmp_path / "d.pgm", np.zeros(3))
    (tmp_path / "e.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        fio.read_pgm(tmp_path / "e.pgm")
    (tmp_path / "f.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(ValueError, match="truncated"):
        fio.read_pgm(tmp_path / "f.pgm")


def test_display_scalings():
    np.testing.assert_array_equal(fio.to_unit_range(np.full((2, 2), 3.0)), 0.0)
    np.testing.assert_allclose(fio.to_unit_range(np.array([1.0, 2.0, 3.0])), [0.0, 127.5, 255.0])
    m = np.array([0.0, np.e - 1, 100.0])
    np.testing.assert_allclose(fio.log_magnitude_image(m), [0.0, 255 / np.log1p(100.0), 255.0])
