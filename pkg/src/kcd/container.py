"""Little-endian binary container shared by model checkpoints and training states.

Layout::

    magic            8 bytes
    version          u32
    meta_len         u32, followed by meta_len bytes of UTF-8 JSON
    n_tensors        u32
    per tensor:
        name_len     u16, followed by UTF-8 name
        dtype code   u8   (see _DTYPES)
        ndim         u8
        shape        ndim x u32
        data         C-order little-endian values
    sha256           32 bytes over everything above
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["ContainerError", "write_container", "read_container"]

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("<c8"),
    4: np.dtype("<c16"),
    5: np.dtype("u1"),
}
_CODES = {dt: code for code, dt in _DTYPES.items()}


class ContainerError(ValueError):
    """Corrupt, truncated, or incompatible container file."""


def write_container(path, magic: bytes, version: int, meta: dict, tensors: dict) -> None:
    assert len(magic) == 8
    buf = io.BytesIO()
    buf.write(magic)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<II", version, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _CODES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        name_bytes = name.encode()
        buf.write(struct.pack("<H", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    payload = buf.getvalue()
    Path(path).write_bytes(payload + hashlib.sha256(payload).digest())


def read_container(path, magic: bytes, supported_version: int) -> tuple[dict, dict]:
    """Return ``(meta, tensors)``; raises :class:`ContainerError` on any defect."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8 + 8 + 4 + 32:
        raise ContainerError(f"{path}: file too short to be a container")
    if raw[:8] != magic:
        raise ContainerError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ContainerError(f"{path}: checksum mismatch (file corrupted)")
    version, meta_len = struct.unpack_from("<II", payload, 8)
    if version != supported_version:
        raise ContainerError(
            f"{path}: format version {version} not supported (this reader handles version {supported_version})")
    pos = 16
    try:
        meta = json.loads(payload[pos:pos + meta_len].decode())
        pos += meta_len
        (n,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        tensors = {}
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos:pos + name_len].decode()
            pos += name_len
            code, ndim = struct.unpack_from("<BB", payload, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", payload, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(payload):
                raise ContainerError(f"{path}: tensor {name!r} truncated")
            tensors[name] = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize,
                                          offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: malformed container ({exc})") from exc
    if pos != len(payload):
        raise ContainerError(f"{path}: {len(payload) - pos} trailing bytes")
    return meta, tensors
