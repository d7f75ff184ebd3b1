"""Binary formats: ``TNSR`` tensors and ``TMCK`` checkpoints.

TNSR: magic ``b"TNSR"``, version byte, dtype byte (0=f32, 1=f64), rank byte,
``rank`` little-endian u32 extents, then the row-major little-endian payload.

TMCK: magic ``b"TMCK"``, version byte, u32 entry count, then per entry a u16
name length, the UTF-8 name and an embedded TNSR blob; finally a u32 length
and a JSON trailer.
"""

from __future__ import annotations

import io
import json
import struct
from typing import BinaryIO

import numpy as np

TNSR_MAGIC = b"TNSR"
TMCK_MAGIC = b"TMCK"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed or unsupported binary blob."""


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"unexpected end of stream (wanted {n} bytes, got {len(buf)})")
    return buf


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise FormatError(f"cannot serialise dtype {arr.dtype}")
    if not 1 <= arr.ndim <= 255:
        raise FormatError(f"unsupported rank {arr.ndim}")
    fh.write(TNSR_MAGIC + bytes([VERSION, _DTYPE_CODES[arr.dtype], arr.ndim]))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[_DTYPE_CODES[arr.dtype]]).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != TNSR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, code, rank = _read_exact(fh, 3)
    if version != VERSION:
        raise FormatError(f"unsupported TNSR version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(blob))


def write_checkpoint(fh: BinaryIO, entries: dict[str, np.ndarray], trailer: dict) -> None:
    fh.write(TMCK_MAGIC + bytes([VERSION]))
    fh.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)) + raw)
        write_tensor(fh, arr)
    meta = json.dumps(trailer, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(struct.pack("<I", len(meta)) + meta)


def read_checkpoint(fh: BinaryIO) -> tuple[dict[str, np.ndarray], dict]:
    magic = _read_exact(fh, 4)
    if magic != TMCK_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    (version,) = _read_exact(fh, 1)
    if version != VERSION:
        raise FormatError(f"unsupported TMCK version {version}")
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, nlen).decode("utf-8")
        if name in entries:
            raise FormatError(f"duplicate entry {name!r}")
        entries[name] = read_tensor(fh)
    (mlen,) = struct.unpack("<I", _read_exact(fh, 4))
    try:
        trailer = json.loads(_read_exact(fh, mlen).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt checkpoint trailer: {exc}") from exc
    return entries, trailer
