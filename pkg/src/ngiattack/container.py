"""Binary container shared by weight files and adversarial batch files.

Layout (all integers little-endian)::

    magic      4 bytes ("NGIW" for weights, "NGIB" for batches)
    version    u16
    blob_len   u32, followed by a UTF-8 JSON header of that length
    n_tensors  u32
    per tensor: dtype code (1 byte: f=f32, d=f64, q=i64), ndim u8,
                ndim x u32 dims, then the raw little-endian payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1
_DTYPES = {b"f": np.dtype("<f4"), b"d": np.dtype("<f8"), b"q": np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class ContainerError(ValueError):
    pass


def dumps(magic: bytes, header: dict, tensors) -> bytes:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [magic, struct.pack("<HI", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for t in tensors:
        t = np.asarray(t)
        dt = t.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise ContainerError(f"unsupported tensor dtype {t.dtype}")
        parts.append(_CODES[dt] + struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype=dt).tobytes())
    return b"".join(parts)


def write(path, magic: bytes, header: dict, tensors) -> None:
    Path(path).write_bytes(dumps(magic, header, tensors))


def _need(buf, pos, n, what):
    if len(buf) - pos < n:
        raise ContainerError(
            f"truncated {what} at offset {pos}: expected {n} bytes, found {len(buf) - pos}"
        )


def loads(buf: bytes, magic: bytes) -> tuple[dict, list[np.ndarray]]:
    _need(buf, 0, 4, "magic")
    if buf[:4] != magic:
        raise ContainerError(f"bad magic {buf[:4]!r} at offset 0, expected {magic!r}")
    _need(buf, 4, 6, "version header")
    version, blob_len = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported version {version} at offset 4")
    pos = 10
    _need(buf, pos, blob_len, "header blob")
    try:
        header = json.loads(buf[pos : pos + blob_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header blob at offset {pos}: {exc}") from None
    pos += blob_len
    _need(buf, pos, 4, "tensor count")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = []
    for i in range(count):
        _need(buf, pos, 2, f"tensor {i} header")
        code = buf[pos : pos + 1]
        if code not in _DTYPES:
            raise ContainerError(f"tensor {i}: unknown dtype code {code!r} at offset {pos}")
        ndim = buf[pos + 1]
        pos += 2
        _need(buf, pos, 4 * ndim, f"tensor {i} shape")
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        _need(buf, pos, nbytes, f"tensor {i} payload")
        tensors.append(np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy())
        pos += nbytes
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes after offset {pos}")
    return header, tensors


def read(path, magic: bytes) -> tuple[dict, list[np.ndarray]]:
    return loads(Path(path).read_bytes(), magic)
