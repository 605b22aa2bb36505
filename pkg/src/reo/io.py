"""Named-array container used for checkpoints and corpus scenes.

Layout (little-endian)::

    b"REO1"  u32 version  u32 n_arrays
    n_arrays x { u16 name_len, name (utf-8), u8 rank, rank x u32 dims, float32 payload }
    u32 state_len, state (utf-8 JSON; may be empty)
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .tensor import DataError

MAGIC = b"REO1"
VERSION = 1


class FormatError(DataError):
    pass


def dumps(arrays, state=None):
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    blob = json.dumps(state, sort_keys=True).encode("utf-8") if state is not None else b""
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


def loads(buf):
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, not a REO1 file")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    off = 12
    arrays = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode("utf-8")
        off += ln
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)
        off += 4 * count
    (slen,) = struct.unpack_from("<I", buf, off)
    off += 4
    state = json.loads(buf[off:off + slen].decode("utf-8")) if slen else None
    if off + slen != len(buf):
        raise FormatError("trailing bytes after state block")
    return arrays, state


def save(path, arrays, state=None):
    data = dumps(arrays, state)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
