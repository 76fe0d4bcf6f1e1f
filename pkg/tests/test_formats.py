import numpy as np
import pytest

from vlkd.formats import (FormatError, load_matrix, load_tensors, save_matrix,
                          save_tensors)


def test_matrix_round_trip_bitwise(tmp_path):
    mat = np.random.default_rng(0).standard_normal((7, 5)).astype(np.float32)
    p = tmp_path / "m.vlkd"
    save_matrix(p, mat)
    loaded = load_matrix(p)
    assert loaded.dtype == np.float32
    assert np.array_equal(loaded, mat)
    # save -> load -> save is byte-identical
    p2 = tmp_path / "m2.vlkd"
    save_matrix(p2, loaded)
    assert p.read_bytes() == p2.read_bytes()


def test_matrix_header_echo(tmp_path):
    p = tmp_path / "m.vlkd"
    save_matrix(p, np.zeros((4, 8), dtype=np.float32))
    assert load_matrix(p).shape == (4, 8)


def test_matrix_bad_magic(tmp_path):
    p = tmp_path / "m.vlkd"
    p.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(FormatError, match="bad magic"):
        load_matrix(p)


def test_matrix_truncated_names_offset(tmp_path):
    p = tmp_path / "m.vlkd"
    save_matrix(p, np.ones((3, 3), dtype=np.float32))
    data = p.read_bytes()
    p.write_bytes(data[:-5])
    with pytest.raises(FormatError, match=r"byte offset \d+"):
        load_matrix(p)


def test_matrix_rejects_nan(tmp_path):
    mat = np.ones((2, 2), dtype=np.float32)
    mat[1, 1] = np.nan
    p = tmp_path / "m.vlkd"
    with open(p, "wb") as f:
        f.write(b"VLKD\x01")
        import struct
        f.write(struct.pack("<II", 2, 2))
        f.write(mat.tobytes())
    with pytest.raises(FormatError, match="non-finite"):
        load_matrix(p)


def test_matrix_version_mismatch(tmp_path):
    p = tmp_path / "m.vlkd"
    save_matrix(p, np.ones((1, 1), dtype=np.float32))
    data = bytearray(p.read_bytes())
    data[4] = 9
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version"):
        load_matrix(p)


def test_tensors_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {
        "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "b.bias": rng.standard_normal(6).astype(np.float32),
        "scalar": np.array([2.5], dtype=np.float32),
    }
    cfg = {"preset": "toy-2L-64H", "step": 12}
    p = tmp_path / "c.vlkc"
    save_tensors(p, tensors, cfg)
    loaded, loaded_cfg = load_tensors(p)
    assert loaded_cfg == cfg
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert np.array_equal(loaded[k], tensors[k])
    p2 = tmp_path / "c2.vlkc"
    save_tensors(p2, loaded, loaded_cfg)
    assert p.read_bytes() == p2.read_bytes()


def test_tensors_bad_magic(tmp_path):
    p = tmp_path / "c.vlkc"
    p.write_bytes(b"XXXX" + b"\x00" * 10)
    with pytest.raises(FormatError, match="bad magic"):
        load_tensors(p)


def test_tensors_truncation(tmp_path):
    p = tmp_path / "c.vlkc"
    save_tensors(p, {"w": np.ones((4, 4), dtype=np.float32)}, {})
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(FormatError, match="truncated"):
        load_tensors(p)
