"""Named-tensor checkpoint container.

Layout::

    b"NTC1\\n"
    uint64 little-endian header length
    header: UTF-8 JSON {"meta": {...}, "tensors": [[name, shape], ...]}
    payloads: float64 little-endian, row-major, one per header entry, same order

Tensor names are written in lexicographic order and the JSON header uses
sorted keys, so identical contents always produce identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from moelora.errors import MoeLoraError

MAGIC = b"NTC1\n"


class CheckpointError(MoeLoraError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    names = sorted(tensors)
    arrays = [np.asarray(tensors[n], dtype="<f8") for n in names]
    header = {"meta": meta or {}, "tensors": [[n, list(a.shape)] for n, a in zip(names, arrays)]}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(blob)), blob]
    parts.extend(a.tobytes(order="C") for a in arrays)
    return b"".join(parts)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a named-tensor checkpoint (bad magic)")
    offset = len(MAGIC)
    if len(data) < offset + 8:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    if offset + hlen > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[offset:offset + hlen].decode("utf-8"))
        entries = [(str(name), [int(d) for d in shape]) for name, shape in header["tensors"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    offset += hlen
    tensors = {}
    for name, shape in entries:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"truncated payload for {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(tuple(shape)).copy()
        offset = end
    if offset != len(data):
        raise CheckpointError("trailing bytes after last payload")
    return tensors, header.get("meta", {})


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
