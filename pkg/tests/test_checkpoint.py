import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from fraudgan import checkpoint as ckpt
from fraudgan.checkpoint import CheckpointError, CheckpointVersionError


def sample_tensors():
    rng = np.random.default_rng(0)
    return {"gen/out_w": ckpt.to_f32(rng.standard_normal((3, 4))), "scalar": ckpt.to_f32(np.array(2.5)),
            "df/conv1_b": ckpt.to_f32(rng.standard_normal(7))}


def test_round_trip_is_bit_identical(tmp_path):
    path = tmp_path / "m.sgan"
    tensors = sample_tensors()
    meta = {"iteration": 4, "config": {"seed": 1, "lam": 1.0}}
    ckpt.save(path, tensors, meta)
    back, meta_back = ckpt.load(path)
    assert meta_back == meta
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert np.array_equal(back[k], tensors[k])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=5),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_float32_values_survive(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("c") / "x.sgan"
    ckpt.save(path, {"a": arr.astype(np.float64)}, {})
    back, _ = ckpt.load(path)
    assert np.array_equal(back["a"], arr.astype(np.float64))


def test_byte_layout(tmp_path):
    path = tmp_path / "m.sgan"
    ckpt.save(path, {"ab": np.array([[1.0, 2.0]])}, {"b": 1, "a": [1, 2]})
    data = path.read_bytes()
    assert data[:4] == b"SGAN"
    assert struct.unpack_from("<II", data, 4) == (ckpt.VERSION, 1)
    assert struct.unpack_from("<I", data, 12) == (2,) and data[16:18] == b"ab"
    assert struct.unpack_from("<III", data, 18) == (2, 1, 2)
    assert np.frombuffer(data[30:38], dtype="<f4").tolist() == [1.0, 2.0]
    (n,) = struct.unpack_from("<I", data, 38)
    assert data[42 : 42 + n] == b'{"a":[1,2],"b":1}'
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_truncated_or_corrupted_file_raises(tmp_path):
    path = tmp_path / "m.sgan"
    ckpt.save(path, sample_tensors(), {"x": 1})
    data = path.read_bytes()
    for cut in (3, 20, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            ckpt.load(path)
    flipped = bytearray(data)
    flipped[25] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        ckpt.load(path)
    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(CheckpointError):
        ckpt.load(path)


def test_version_mismatch_is_explicit(tmp_path):
    path = tmp_path / "m.sgan"
    ckpt.save(path, sample_tensors(), {})
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", ckpt.VERSION + 1)
    body = bytes(data[:-4])
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(CheckpointVersionError):
        ckpt.load(path)


def test_canonical_json_sorted_and_compact():
    assert ckpt.canonical_json({"b": 1, "a": {"d": 2, "c": 3}}) == b'{"a":{"c":3,"d":2},"b":1}'
    assert json.loads(ckpt.canonical_json({"x": [1.5]})) == {"x": [1.5]}
    with pytest.raises(ValueError):
        ckpt.canonical_json({"x": float("nan")})


def test_save_is_deterministic(tmp_path):
    a, b = tmp_path / "a.sgan", tmp_path / "b.sgan"
    ckpt.save(a, sample_tensors(), {"k": 1})
    ckpt.save(b, sample_tensors(), {"k": 1})
    assert a.read_bytes() == b.read_bytes()
