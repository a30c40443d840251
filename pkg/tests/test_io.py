from __future__ import annotations

import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from costeps import io
from costeps.io import CrcError, TensorFileError
from costeps.model import DiT
from costeps.tasks import make_instances

from conftest import tiny_config


def reference_encode(arr):
    """Field-by-field writer used as an oracle for the header layout."""
    tag = {np.dtype("float32"): 0, np.dtype("float64"): 1}[arr.dtype]
    head = b"COST" + struct.pack("<I", 1) + bytes([tag, arr.ndim])
    for d in arr.shape:
        head += struct.pack("<I", d)
    payload = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    return head + payload + struct.pack("<I", zlib.crc32(payload))


@given(arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=1, max_dims=4, max_side=5)))
def test_tensor_roundtrip_bit_exact(arr):
    buf = io.encode_tensor(arr)
    assert buf == reference_encode(arr)
    back = io.decode_tensor(buf)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_file_roundtrip_and_dtype_tag(tmp_path):
    arr = np.arange(12, dtype=np.float64).reshape(3, 4)
    io.tensorfile_write(tmp_path / "a.cost", arr)
    assert io.read_dtype_tag(tmp_path / "a.cost") == 1
    assert np.array_equal(io.tensorfile_read(tmp_path / "a.cost").data, arr)


@pytest.mark.parametrize("offset", [-5, -20, 30])
def test_corrupted_payload_fails_crc(offset):
    buf = bytearray(io.encode_tensor(np.linspace(0, 1, 16, dtype=np.float32)))
    buf[offset] ^= 0x01
    with pytest.raises(CrcError):
        io.decode_tensor(bytes(buf))


def test_malformed_files_rejected():
    good = io.encode_tensor(np.ones(4, np.float32))
    with pytest.raises(TensorFileError):
        io.decode_tensor(b"XXXX" + good[4:])
    with pytest.raises(TensorFileError):
        io.decode_tensor(good[:-3])
    with pytest.raises(TensorFileError):
        io.decode_tensor(good + b"\x00")
    with pytest.raises(TensorFileError):
        io.decode_tensor(good[:4] + struct.pack("<I", 9) + good[8:])
    with pytest.raises(TensorFileError):
        io.encode_tensor(np.ones(3, np.int32))


def test_checkpoint_roundtrip(tmp_path):
    m = DiT(tiny_config(), seed=8)
    io.save_checkpoint(tmp_path / "m.cosk", m, {"steps": 3})
    back, manifest = io.load_checkpoint(tmp_path / "m.cosk")
    assert manifest["extra"] == {"steps": 3}
    assert back.config == m.config
    for k in m.params:
        assert back.params[k].data.tobytes() == m.params[k].data.tobytes()


def test_checkpoint_corruption_detected(tmp_path):
    m = DiT(tiny_config(), seed=8)
    path = tmp_path / "m.cosk"
    io.save_checkpoint(path, m)
    buf = bytearray(path.read_bytes())
    buf[-10] ^= 0xFF
    path.write_bytes(bytes(buf))
    with pytest.raises(CrcError):
        io.load_checkpoint(path)


def test_instance_roundtrip(tmp_path):
    inst = make_instances("maze", 1, 4)[0]
    io.save_instance(tmp_path / "i0", inst)
    back = io.load_instance(tmp_path / "i0")
    assert back.id == inst.id and np.array_equal(back.target, inst.target)


def test_array_with_axes_sidecar(tmp_path):
    import json

    io.save_array_with_axes(tmp_path / "m.cost", np.zeros((2, 3)), ["a", "b"], {"note": 1})
    side = json.loads((tmp_path / "m.json").read_text())
    assert side == {"axes": ["a", "b"], "shape": [2, 3], "note": 1}
