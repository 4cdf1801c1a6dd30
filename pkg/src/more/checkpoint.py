"""Binary checkpoint container.

Layout (little-endian)::

    b"MORE"            magic
    u32                format version
    repeated until EOF:
        u32            path length in bytes
        bytes          UTF-8 path
        u8             dtype tag (0 float64, 1 float32, 2 int64, 3 uint8)
        u32            rank
        u64 * rank     extents
        bytes          raw C-order data

Records are written in sorted path order. The ``__meta__`` record holds a
UTF-8 JSON document (sorted keys) as a uint8 vector.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"MORE"
VERSION = 1
META_KEY = "__meta__"

_TAGS = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}
_DTYPES = {v: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    pass


def encode(tensors: Dict[str, np.ndarray], meta: dict) -> bytes:
    records = dict(tensors)
    records[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    out = [MAGIC, struct.pack("<I", VERSION)]
    for path in sorted(records):
        arr = np.asarray(records[path])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {path}")
        arr = np.asarray(arr, dtype=dt, order="C")
        name = path.encode("utf-8")
        out.append(struct.pack("<I", len(name)))
        out.append(name)
        out.append(struct.pack("<BI", _TAGS[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode(raw: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    tensors: Dict[str, np.ndarray] = {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            path = raw[pos : pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BI", raw, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            dt = _DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            tensors[path] = np.frombuffer(raw[pos : pos + nbytes], dtype=dt).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    meta_raw = tensors.pop(META_KEY, None)
    meta = json.loads(meta_raw.tobytes().decode("utf-8")) if meta_raw is not None else {}
    return tensors, meta


def save(path, tensors: Dict[str, np.ndarray], meta: dict) -> None:
    Path(path).write_bytes(encode(tensors, meta))


def load(path) -> Tuple[Dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


def array_digest(arrays: Dict[str, np.ndarray]) -> str:
    """Order-independent SHA-256 over named arrays (used for freeze checks)."""
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode("utf-8"))
        h.update(np.asarray(arrays[k], order="C").tobytes())
    return h.hexdigest()
