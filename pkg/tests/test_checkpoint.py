"""Checkpoint format: byte-level layout, round trips, corruption handling.

The layout test parses the file with raw struct calls -- not the library's
own reader -- so reader and writer cannot share a bug.
"""

import struct

import numpy as np
import pytest

from fruitgrade import checkpoint as C
from fruitgrade.errors import DataError


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "fc1.weight": rng.standard_normal((3, 5)).astype(np.float32),
        "fc1.bias": rng.standard_normal(3).astype(np.float32),
        "scalarish": np.float32(2.5) * np.ones((), np.float32),
    }


def test_round_trip_bit_identical(tmp_path):
    path = tmp_path / "w.mgck"
    tensors = sample_tensors()
    C.save_checkpoint(path, tensors)
    back = C.load_checkpoint(path)
    assert set(back) == set(tensors)
    for name, arr in tensors.items():
        assert back[name].dtype == np.float32
        assert back[name].shape == arr.shape
        assert np.array_equal(back[name].view(np.uint32), arr.view(np.uint32)), name


def test_save_is_deterministic(tmp_path):
    a, b = tmp_path / "a.mgck", tmp_path / "b.mgck"
    C.save_checkpoint(a, sample_tensors())
    C.save_checkpoint(b, sample_tensors())
    assert a.read_bytes() == b.read_bytes()


def test_byte_layout_parsed_independently(tmp_path):
    path = tmp_path / "w.mgck"
    w = np.arange(6, dtype=np.float32).reshape(2, 3)
    b = np.array([1.5], np.float32)
    C.save_checkpoint(path, {"w": w, "b": b})

    raw = path.read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        out = raw[pos:pos + n]
        pos += n
        return out

    assert take(4) == b"MGCK"
    assert struct.unpack("<I", take(4)) == (1,)    # version
    assert struct.unpack("<I", take(4)) == (2,)    # tensor count

    (nl,) = struct.unpack("<H", take(2))
    assert take(nl).decode() == "w"
    (ndim,) = struct.unpack("<B", take(1))
    assert ndim == 2
    assert struct.unpack("<II", take(8)) == (2, 3)
    vals = struct.unpack("<6f", take(24))
    assert vals == (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)

    (nl,) = struct.unpack("<H", take(2))
    assert take(nl).decode() == "b"
    (ndim,) = struct.unpack("<B", take(1))
    assert ndim == 1
    assert struct.unpack("<I", take(4)) == (1,)
    assert struct.unpack("<f", take(4)) == (1.5,)
    assert pos == len(raw)


def test_preserves_insertion_order_and_nonfinite_bits(tmp_path):
    path = tmp_path / "w.mgck"
    special = np.array([np.inf, -np.inf, np.nan, -0.0], np.float32)
    C.save_checkpoint(path, {"z": special, "a": np.zeros(1, np.float32)})
    back = C.load_checkpoint(path)
    assert list(back) == ["z", "a"]
    assert np.array_equal(back["z"].view(np.uint32), special.view(np.uint32))


def test_missing_file_raises():
    with pytest.raises(DataError):
        C.load_checkpoint("/nonexistent/x.mgck")


def test_bad_magic_raises(tmp_path):
    path = tmp_path / "junk.mgck"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError):
        C.load_checkpoint(path)


def test_unsupported_version_raises(tmp_path):
    path = tmp_path / "v9.mgck"
    path.write_bytes(b"MGCK" + struct.pack("<I", 9) + struct.pack("<I", 0))
    with pytest.raises(DataError):
        C.load_checkpoint(path)


def test_truncated_file_raises(tmp_path):
    path = tmp_path / "w.mgck"
    C.save_checkpoint(path, sample_tensors())
    whole = path.read_bytes()
    path.write_bytes(whole[:-3])
    with pytest.raises(DataError):
        C.load_checkpoint(path)


def test_trailing_bytes_raise(tmp_path):
    path = tmp_path / "w.mgck"
    C.save_checkpoint(path, sample_tensors())
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(DataError):
        C.load_checkpoint(path)


def test_empty_mapping_round_trips(tmp_path):
    path = tmp_path / "empty.mgck"
    C.save_checkpoint(path, {})
    assert C.load_checkpoint(path) == {}


def test_float64_input_saved_as_float32(tmp_path):
    path = tmp_path / "w.mgck"
    C.save_checkpoint(path, {"x": np.array([0.1], np.float64)})
    back = C.load_checkpoint(path)
    assert back["x"].dtype == np.float32
    assert back["x"][0] == np.float32(0.1)
