"""Binary tensor records and the checkpoint container."""

import struct

import numpy as np
import pytest

from semvos import tensorio
from semvos.errors import DataError


def test_record_layout_is_pinned():
    arr = np.array([[1.0, 2.0], [3.0, 4.0]])
    blob = tensorio.tensor_to_bytes(arr)
    assert blob[:4] == b"VOST"
    version, rank = struct.unpack_from("<II", blob, 4)
    assert version == 1
    assert rank == 2
    dims = struct.unpack_from("<2Q", blob, 12)
    assert dims == (2, 2)
    payload = np.frombuffer(blob, dtype="<f4", offset=28)
    assert np.array_equal(payload, np.array([1, 2, 3, 4], dtype=np.float32))
    assert len(blob) == 28 + 16


def test_roundtrip_through_float32(tmp_path, rng):
    arr = rng.normal(size=(3, 4, 5))
    path = str(tmp_path / "t.bin")
    tensorio.save_tensor(path, arr)
    back = tensorio.load_tensor(path)
    assert back.dtype == np.float64
    assert np.array_equal(back, arr.astype(np.float32).astype(np.float64))


def test_roundtrip_exact_for_float32_values(tmp_path, rng):
    arr = rng.normal(size=(6,)).astype(np.float32).astype(np.float64)
    path = str(tmp_path / "t.bin")
    tensorio.save_tensor(path, arr)
    assert np.array_equal(tensorio.load_tensor(path), arr)


def test_scalar_record_roundtrip():
    blob = tensorio.tensor_to_bytes(np.float64(2.5))
    arr, end = tensorio.tensor_from_bytes(blob)
    assert arr.shape == ()
    assert float(arr) == 2.5
    assert end == len(blob)


def test_bad_magic():
    blob = b"XXXX" + b"\x00" * 20
    with pytest.raises(DataError, match="magic"):
        tensorio.tensor_from_bytes(blob)


def test_unsupported_version():
    blob = b"VOST" + struct.pack("<II", 9, 0)
    with pytest.raises(DataError, match="version"):
        tensorio.tensor_from_bytes(blob)


def test_truncation_errors():
    full = tensorio.tensor_to_bytes(np.ones((2, 3)))
    with pytest.raises(DataError, match="truncated"):
        tensorio.tensor_from_bytes(full[:8])
    with pytest.raises(DataError, match="truncated"):
        tensorio.tensor_from_bytes(full[:16])
    with pytest.raises(DataError, match="truncated"):
        tensorio.tensor_from_bytes(full[:-4])


def test_trailing_bytes_rejected(tmp_path):
    path = str(tmp_path / "t.bin")
    with open(path, "wb") as fh:
        fh.write(tensorio.tensor_to_bytes(np.ones(3)) + b"junk")
    with pytest.raises(DataError, match="trailing"):
        tensorio.load_tensor(path)


def test_missing_file_is_a_data_error(tmp_path):
    with pytest.raises(DataError):
        tensorio.load_tensor(str(tmp_path / "absent.bin"))


def test_checkpoint_roundtrip(tmp_path, rng):
    tensors = {"a.weight": rng.normal(size=(2, 2)).astype(np.float32).astype(np.float64),
               "b.bias": np.arange(3.0)}
    meta = {"kind": "weights", "note": "x"}
    path = str(tmp_path / "ckpt.bin")
    tensorio.save_checkpoint(path, tensors, meta)
    back, meta_back = tensorio.load_checkpoint(path)
    assert set(back) == set(tensors)
    for name in tensors:
        assert np.array_equal(back[name], tensors[name])
    assert meta_back == meta


def test_checkpoint_header_is_json_index(tmp_path):
    import json
    path = str(tmp_path / "ckpt.bin")
    tensorio.save_checkpoint(path, {"t": np.zeros(2)}, {"k": 1})
    with open(path, "rb") as fh:
        buf = fh.read()
    (hlen,) = struct.unpack_from("<Q", buf, 0)
    header = json.loads(buf[8:8 + hlen].decode())
    assert header["meta"] == {"k": 1}
    offset = header["tensors"]["t"]
    assert buf[offset:offset + 4] == b"VOST"


def test_checkpoint_malformed_header(tmp_path):
    path = str(tmp_path / "ckpt.bin")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", 4) + b"nope")
    with pytest.raises(DataError, match="header"):
        tensorio.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = str(tmp_path / "ckpt.bin")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", 100) + b"{}")
    with pytest.raises(DataError, match="truncated"):
        tensorio.load_checkpoint(path)


def test_checkpoint_empty(tmp_path):
    path = str(tmp_path / "ckpt.bin")
    tensorio.save_checkpoint(path, {}, {})
    tensors, meta = tensorio.load_checkpoint(path)
    assert tensors == {} and meta == {}
