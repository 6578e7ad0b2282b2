import numpy as np
import pytest

from handrestore import io


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8, np.uint16])
def test_tensor_round_trip_is_bit_exact(tmp_path, dtype):
    rng = np.random.default_rng(0)
    if np.issubdtype(dtype, np.floating):
        a = rng.normal(size=(3, 5, 2)).astype(dtype)
        a.flat[0] = np.nan
        a.flat[1] = -0.0
    else:
        a = rng.integers(0, np.iinfo(dtype).max, (4, 7), endpoint=True).astype(dtype)
    io.write_tensor(tmp_path / "t.rvt", a)
    b = io.read_tensor(tmp_path / "t.rvt")
    assert b.dtype == a.dtype and b.shape == a.shape
    assert a.tobytes() == b.tobytes()


def test_tensor_header_layout():
    buf = io.encode_tensor(np.zeros((2, 3), np.float64))
    assert buf[:4] == b"RVT1"
    assert buf[4:8] == bytes([1, 2, 0, 0])
    assert buf[8:16] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(buf) == 16 + 6 * 8


def test_scalar_and_empty_tensors():
    for a in (np.float32(2.5) * np.ones(()), np.zeros((0, 4), np.uint8)):
        b = io.decode_tensor(io.encode_tensor(a))
        assert b.shape == a.shape and b.tobytes() == a.tobytes()


def test_bool_is_stored_as_u8():
    m = np.array([[True, False], [False, True]])
    assert np.array_equal(io.decode_tensor(io.encode_tensor(m)), m.astype(np.uint8))


def test_tensor_rejects_bad_input():
    with pytest.raises(io.FormatError):
        io.encode_tensor(np.zeros(3, np.complex128))
    good = io.encode_tensor(np.zeros(4, np.float32))
    with pytest.raises(io.FormatError, match="magic"):
        io.decode_tensor(b"XXXX" + good[4:])
    with pytest.raises(io.FormatError, match="payload"):
        io.decode_tensor(good[:-1])
    with pytest.raises(io.FormatError):
        io.decode_tensor(good[:4] + bytes([9]) + good[5:])


def test_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(1).integers(0, 256, (7, 5, 3)).astype(np.uint8)
    io.write_ppm(tmp_path / "a.ppm", rgb)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n5 7\n255\n")
    assert np.array_equal(io.read_ppm(tmp_path / "a.ppm"), rgb)


def test_ppm_rejects_other_formats(tmp_path):
    with pytest.raises(io.FormatError):
        io.write_ppm(tmp_path / "a.ppm", np.zeros((4, 4), np.uint8))
    (tmp_path / "b.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(io.FormatError):
        io.read_ppm(tmp_path / "b.ppm")


def test_canonical_json_and_hash():
    a = {"b": 1, "a": [1.5, {"y": None, "x": True}]}
    b = {"a": [1.5, {"x": True, "y": None}], "b": 1}
    assert io.canonical_json(a) == io.canonical_json(b)
    assert io.content_hash(a) == io.content_hash(b)
    assert io.content_hash(a) != io.content_hash({**a, "b": 2})


def test_json_file_round_trip(tmp_path):
    doc = {"k": [1, 2.25, "s"], "n": {"z": 0}}
    io.write_json(tmp_path / "d.json", doc)
    assert io.read_json(tmp_path / "d.json") == doc
