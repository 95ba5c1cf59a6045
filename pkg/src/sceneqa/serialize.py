"""Versioned binary container of named tensors.

Layout (all integers little-endian)::

    magic   b"NTC1"
    u32     format version
    u64     payload length in bytes
    32B     sha256 of the payload
    payload:
        u32 metadata length, metadata (utf-8 JSON)
        u32 tensor count
        per tensor: u16 name length, name (utf-8), u8 dtype code,
                    u8 ndim, ndim x u64 extents, raw little-endian values
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"NTC1"
VERSION = 1
_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODE_OF = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int64"): 2}


class IntegrityError(ValueError):
    """The container is truncated, corrupt, or of an unknown version."""


def dumps(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, Any] | None = None) -> bytes:
    body = io.BytesIO()
    meta = json.dumps(dict(metadata or {}), sort_keys=True).encode()
    body.write(struct.pack("<I", len(meta)))
    body.write(meta)
    body.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype not in _CODE_OF:
            raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        body.write(struct.pack("<H", len(raw_name)))
        body.write(raw_name)
        body.write(struct.pack("<BB", _CODE_OF[arr.dtype], arr.ndim))
        body.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        body.write(np.ascontiguousarray(arr, dtype=_CODES[_CODE_OF[arr.dtype]]).tobytes())
    payload = body.getvalue()
    header = MAGIC + struct.pack("<IQ", VERSION, len(payload)) + hashlib.sha256(payload).digest()
    return header + payload


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < 48 or blob[:4] != MAGIC:
        raise IntegrityError("not a named-tensor container (bad magic or short header)")
    version, length = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise IntegrityError(f"unsupported container version {version}")
    digest = blob[16:48]
    payload = blob[48:]
    if len(payload) != length:
        raise IntegrityError(f"payload length {len(payload)} does not match header ({length})")
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError("payload checksum mismatch")
    pos = 0

    def read(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, payload, pos)
        pos += struct.calcsize(fmt)
        return vals

    (meta_len,) = read("<I")
    metadata = json.loads(payload[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = read("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = read("<H")
        name = payload[pos:pos + name_len].decode()
        pos += name_len
        code, ndim = read("<BB")
        if code not in _CODES:
            raise IntegrityError(f"tensor {name!r}: unknown dtype code {code}")
        shape = read(f"<{ndim}Q")
        dtype = _CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
        pos += nbytes
        tensors[name] = arr.reshape(shape).astype(dtype.newbyteorder("="))
    return tensors, metadata


def save(path: str | Path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, Any] | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors, metadata))
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
