"""Named-tensor checkpoint container.

Layout::

    b"EMOGENCK"                 8-byte magic
    uint32 little-endian        header length in bytes
    header                      UTF-8 JSON
    payload                     little-endian float32, tensors back to back

The header holds ``format_version``, ``variant``, ``config`` and a
``tensors`` table mapping each name to its shape and byte offset into the
payload.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"EMOGENCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(tensors: Mapping[str, np.ndarray], variant: str, config: dict, extra: dict | None = None) -> bytes:
    if not variant:
        raise CheckpointError("variant tag is mandatory")
    table = {}
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        table[name] = {"shape": list(a.shape), "offset": offset}
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "variant": variant,
        "config": config,
        "tensors": table,
    }
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def loads(blob: bytes):
    """Return ``(tensors, header)``."""
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    payload = memoryview(blob)[12 + hlen:]
    tensors = {}
    for name, info in header["tensors"].items():
        shape = tuple(info["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start = info["offset"]
        if start + 4 * n > len(payload):
            raise CheckpointError(f"tensor {name} overruns payload")
        tensors[name] = np.frombuffer(payload[start:start + 4 * n], dtype="<f4").reshape(shape).astype(np.float32)
    return tensors, header


def save(path, tensors, variant, config, extra=None):
    atomic_write_bytes(path, dumps(tensors, variant, config, extra))


def load(path):
    return loads(Path(path).read_bytes())
