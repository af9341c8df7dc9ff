"""Binary checkpoints of named parameter arrays.

Layout::

    b"ANYSATCK" | u32 version | u64 metadata length | UTF-8 JSON metadata
    then per record: u32 name length | name | u8 dtype (0 f32, 1 f64) | u8 rank | u64 dims... | payload

All integers and payloads are little-endian.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ANYSATCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {"f32": 0, "f64": 1}


class CheckpointError(OSError):
    pass


def checkpoint_bytes(arrays: Mapping[str, np.ndarray], meta: dict, dtype: str = "f64") -> bytes:
    if dtype not in _CODES:
        raise ValueError(f"dtype must be one of {sorted(_CODES)}")
    code = _CODES[dtype]
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [_PREFIX.pack(MAGIC, VERSION, len(mb)), mb]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        a = np.asarray(arr, dtype=_DTYPES[code], order="C")  # ascontiguousarray would promote 0-d to 1-d
        out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<BB", code, a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict, dtype: str = "f64") -> None:
    Path(path).write_bytes(checkpoint_bytes(arrays, meta, dtype))


def parse_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("checkpoint truncated")
    magic, version, mlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = _PREFIX.size
    if pos + mlen > len(blob):
        raise CheckpointError("checkpoint truncated inside metadata")
    try:
        meta = json.loads(blob[pos : pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint metadata: {exc}") from None
    pos += mlen
    arrays: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            if code not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            dt = _DTYPES[code]
            nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{name}: payload truncated")
            arrays[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint record: {exc}") from None
    return arrays, meta


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return parse_checkpoint(Path(path).read_bytes())


def tree_hash(arrays: Mapping[str, np.ndarray], dtype: str = "f64") -> str:
    """sha256 over sorted names and values at the given storage precision."""
    h = hashlib.sha256()
    dt = _DTYPES[_CODES[dtype]]
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=dt, order="C")
        h.update(name.encode("utf-8"))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
