"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"S2S1"                       magic
    u32 version                   currently 1
    u32 count                     number of arrays
    count x header entry:
        u16 name length, name (utf-8), u8 dtype (0=f32, 1=f64), u8 ndim, ndim x u32 dims
    payload                       each array's raw bytes, in header order
    footer:
        u64 step
        32 bytes                  sha256 digest of the model config
        u32 length, metadata      utf-8 JSON (config, metrics, optimizer counters)

Writes go to a temporary file in the same directory and are renamed into
place, so a reader never sees a partial checkpoint.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"S2S1"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointFile:
    arrays: dict
    step: int
    digest: bytes
    meta: dict = field(default_factory=dict)


def save(path: str, arrays: dict, step: int, digest: bytes, meta: dict | None = None) -> None:
    if len(digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    footer = struct.pack("<Q", step) + digest + struct.pack("<I", len(blob)) + blob
    data = b"".join(parts) + b"".join(payload) + footer

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str, expect_digest: bytes | None = None) -> CheckpointFile:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        header.append((name, _DTYPES[code], shape))
    arrays = {}
    for name, dt, shape in header:
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(data, dtype=dt, count=size // dt.itemsize,
                                     offset=pos).reshape(shape).copy()
        pos += size
    (step,) = struct.unpack_from("<Q", data, pos)
    digest = data[pos + 8:pos + 40]
    (n,) = struct.unpack_from("<I", data, pos + 40)
    meta = json.loads(data[pos + 44:pos + 44 + n].decode("utf-8"))
    if expect_digest is not None and digest != expect_digest:
        raise CheckpointError(f"{path}: checkpoint was written for a different model config")
    return CheckpointFile(arrays, step, digest, meta)
