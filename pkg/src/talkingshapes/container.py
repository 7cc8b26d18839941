"""Bit-exact binary container for named tensors.

File layout, all integers little-endian:

    magic    4 bytes   b"RTEN"
    version  u16       currently 1
    count    u32       number of entries
    entry*   name_len u16, name utf-8, dtype u8, rank u8,
             dims u64 * rank, payload row-major

dtype codes: 1 = float32, 2 = float64, 3 = uint8, 4 = bool (one byte per
element, 0 or 1). Entry names must be unique. Readers reject unknown
versions and dtype codes outright instead of guessing, and verify that the
payload length matches the declared dims exactly.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .errors import ValidationError

MAGIC = b"RTEN"
VERSION = 1

_CODE_TO_DTYPE = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("u1"),
    4: np.dtype("?"),
}
_DTYPE_TO_CODE = {
    np.dtype(np.float32): 1,
    np.dtype(np.float64): 2,
    np.dtype(np.uint8): 3,
    np.dtype(np.bool_): 4,
}


def write_tensors(path, entries: Mapping[str, np.ndarray]) -> None:
    """Write named arrays to `path` in insertion order.

    Only float32, float64, uint8 and bool arrays are accepted; anything else
    must be converted explicitly by the caller so no silent precision change
    can hide in serialization.
    """
    blobs = []
    seen = set()
    for name, arr in entries.items():
        if not isinstance(name, str) or not name:
            raise ValidationError(f"entry name must be a non-empty string, got {name!r}")
        if name in seen:
            raise ValidationError(f"duplicate entry name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        code = _DTYPE_TO_CODE.get(arr.dtype)
        if code is None:
            raise ValidationError(
                f"entry {name!r} has unsupported dtype {arr.dtype}; "
                "convert to float32/float64/uint8/bool first"
            )
        if arr.ndim > 255:
            raise ValidationError(f"entry {name!r} has rank {arr.ndim} > 255")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise ValidationError(f"entry name {name!r} too long")
        payload = np.ascontiguousarray(arr).astype(_CODE_TO_DTYPE[code], copy=False)
        header = struct.pack("<H", len(name_b)) + name_b
        header += struct.pack("<BB", code, arr.ndim)
        header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blobs.append(header + payload.tobytes())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(blobs)))
        for blob in blobs:
            f.write(blob)


def read_tensors(path) -> dict[str, np.ndarray]:
    """Read a container written by `write_tensors`, preserving entry order."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 10 or data[:4] != MAGIC:
        raise ValidationError(f"{path}: not a tensor container (bad magic)")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    off = 10
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            code, rank = struct.unpack_from("<BB", data, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}Q", data, off)
            off += 8 * rank
        except (struct.error, UnicodeDecodeError) as exc:
            raise ValidationError(f"{path}: truncated or corrupt header") from exc
        dtype = _CODE_TO_DTYPE.get(code)
        if dtype is None:
            raise ValidationError(f"{path}: entry {name!r} has unknown dtype code {code}")
        if name in out:
            raise ValidationError(f"{path}: duplicate entry name {name!r}")
        n_elems = 1
        for d in dims:
            n_elems *= d
        n_bytes = n_elems * dtype.itemsize
        if off + n_bytes > len(data):
            raise ValidationError(
                f"{path}: entry {name!r} declares {n_bytes} payload bytes "
                f"but only {len(data) - off} remain"
            )
        raw = data[off : off + n_bytes]
        off += n_bytes
        if code == 4:
            arr = (np.frombuffer(raw, dtype=np.uint8) != 0).reshape(dims)
        else:
            arr = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        out[name] = arr
    if off != len(data):
        raise ValidationError(f"{path}: {len(data) - off} trailing bytes after last entry")
    return out
