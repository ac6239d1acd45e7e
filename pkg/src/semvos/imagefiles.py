"""Binary PPM/PGM image files.

Frames are P6 PPM (8-bit RGB), label masks are P5 PGM with the pixel
value equal to the object id (0 = background). Both are written with a
fixed header layout so identical inputs produce identical bytes.
"""

from __future__ import annotations

import re
from typing import Tuple

import numpy as np

from .errors import DataError


def write_ppm(path: str, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"PPM writer needs [H, W, 3] uint8, got {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def write_pgm(path: str, gray: np.ndarray) -> None:
    if gray.ndim != 2:
        raise DataError(f"PGM writer needs [H, W], got {gray.shape}")
    if gray.min() < 0 or gray.max() > 255:
        raise DataError("PGM values must fit in a byte")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def _read_header(buf: bytes, magic: bytes, path: str) -> Tuple[int, int, int]:
    if not buf.startswith(magic):
        raise DataError(f"{path}: expected {magic.decode()} file")
    # header = magic, width, height, maxval separated by whitespace;
    # '#' comments may appear between fields
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        m = re.match(rb"\d+", buf[pos:])
        if not m:
            raise DataError(f"{path}: malformed header")
        fields.append(int(m.group()))
        pos += m.end()
    if not buf[pos:pos + 1].isspace():
        raise DataError(f"{path}: missing whitespace after maxval")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit images supported, maxval={maxval}")
    return w, h, pos


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def read_ppm(path: str) -> np.ndarray:
    buf = _read_bytes(path)
    w, h, pos = _read_header(buf, b"P6", path)
    need = w * h * 3
    if len(buf) - pos < need:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


def read_pgm(path: str) -> np.ndarray:
    buf = _read_bytes(path)
    w, h, pos = _read_header(buf, b"P5", path)
    need = w * h
    if len(buf) - pos < need:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()
