"""FDMP feature-dump format and the named-section checkpoint container.

FDMP blob, all little-endian::

    b"FDMP" | u32 version (=1) | u32 ndim | ndim x u64 dims | row-major f64 payload

A checkpoint is a plain concatenation of sections, each ``u32 key_len | key
(UTF-8) | FDMP blob``, read until end of file.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"FDMP"
VERSION = 1


class FdmpError(ValueError):
    pass


def dump_array(arr, fh: BinaryIO) -> None:
    a = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, a.ndim))
    if a.ndim:
        fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(a.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise FdmpError(f"truncated FDMP stream (wanted {n} bytes, got {len(b)})")
    return b


def load_array(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != MAGIC:
        raise FdmpError(f"bad magic {magic!r}")
    version, ndim = struct.unpack("<II", _read_exact(fh, 8))
    if version != VERSION:
        raise FdmpError(f"unsupported FDMP version {version}")
    dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim)) if ndim else ()
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = _read_exact(fh, 8 * count)
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def write_fdmp(path, arr) -> None:
    with open(path, "wb") as fh:
        dump_array(arr, fh)


def read_fdmp(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = load_array(fh)
        if fh.read(1):
            raise FdmpError(f"{path}: trailing bytes after FDMP payload")
    return arr


def to_bytes(arr) -> bytes:
    buf = io.BytesIO()
    dump_array(arr, buf)
    return buf.getvalue()


def write_sections(path, sections: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for key, arr in sections.items():
            name = key.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            dump_array(arr, fh)


def read_sections(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    fh = io.BytesIO(data)
    out: dict[str, np.ndarray] = {}
    while fh.tell() < len(data):
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        key = _read_exact(fh, n).decode("utf-8")
        if key in out:
            raise FdmpError(f"duplicate section {key!r}")
        out[key] = load_array(fh)
    return out
