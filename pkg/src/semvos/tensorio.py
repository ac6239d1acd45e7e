"""Binary tensor records and the checkpoint container built from them.

A tensor record is::

    magic "VOST" | u32 version=1 | u32 rank | u64 dims[rank] | f32 payload

with all integers little-endian and the payload row-major float32. A
checkpoint is a u64 header length, a JSON header of exactly that many
bytes mapping tensor names to absolute file offsets plus free-form
metadata, then the records themselves. Payloads pass through float32 on
save, so loading returns float64 arrays whose values are exactly
representable in single precision.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Tuple

import numpy as np

from .errors import DataError

MAGIC = b"VOST"
VERSION = 1


def tensor_to_bytes(array: np.ndarray) -> bytes:
    # asarray with order="C", not ascontiguousarray: the latter promotes
    # 0-d arrays to shape (1,) and would change the recorded rank
    arr = np.asarray(array, dtype=np.float32, order="C")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + dims + arr.tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one record at ``offset``; returns (array, next_offset)."""
    if len(buf) < offset + 12:
        raise DataError("tensor record truncated before header")
    if buf[offset:offset + 4] != MAGIC:
        raise DataError(f"bad tensor magic {buf[offset:offset + 4]!r}")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != VERSION:
        raise DataError(f"unsupported tensor format version {version}")
    pos = offset + 12
    if len(buf) < pos + 8 * rank:
        raise DataError("tensor record truncated inside dims")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
    pos += 8 * rank
    count = 1
    for d in dims:
        count *= d
    end = pos + 4 * count
    if len(buf) < end:
        raise DataError("tensor record truncated inside payload")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
    return data.reshape(dims).astype(np.float64), end


def save_tensor(path: str, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(array))


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def load_tensor(path: str) -> np.ndarray:
    buf = _read_bytes(path)
    array, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise DataError(f"trailing bytes after tensor record in {path}")
    return array


def save_checkpoint(path: str, tensors: Dict[str, np.ndarray], meta: dict) -> None:
    """Write named tensors plus JSON metadata as one checkpoint file."""
    records = {name: tensor_to_bytes(arr) for name, arr in tensors.items()}
    # The offsets live inside the header, and growing an offset's digit
    # count grows the header, which shifts every offset. Iterate to the
    # fixed point; the header length is monotone so this terminates fast.
    offsets = {name: 0 for name in records}
    while True:
        header = json.dumps({"tensors": offsets, "meta": meta}).encode()
        pos = 8 + len(header)
        updated = {}
        for name, blob in records.items():
            updated[name] = pos
            pos += len(blob)
        if updated == offsets:
            break
        offsets = updated
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in records.values():
            fh.write(blob)


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    buf = _read_bytes(path)
    if len(buf) < 8:
        raise DataError(f"checkpoint {path} truncated before header length")
    (hlen,) = struct.unpack_from("<Q", buf, 0)
    if len(buf) < 8 + hlen:
        raise DataError(f"checkpoint {path} truncated inside header")
    try:
        header = json.loads(buf[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"checkpoint {path} has a malformed header: {exc}") from exc
    if not isinstance(header, dict) or "tensors" not in header:
        raise DataError(f"checkpoint {path} header lacks a tensor table")
    tensors = {}
    for name, offset in header["tensors"].items():
        tensors[name], _ = tensor_from_bytes(buf, int(offset))
    return tensors, header.get("meta", {})
