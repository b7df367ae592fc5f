"""RPCK checkpoint files.

Layout (all integers little-endian u32)::

    b"RPCK"  version  meta_len  meta_bytes[meta_len]
    then records until EOF:
        name_len  name_utf8  rank  extents[rank]  f32_payload[prod(extents)]

``meta_bytes`` is UTF-8 text of ``key=value`` lines.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"RPCK"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def encode_metadata(meta: Mapping[str, object]) -> bytes:
    lines = []
    for k, v in meta.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise CheckpointError(f"metadata entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def decode_metadata(raw: bytes) -> dict[str, str]:
    meta = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            meta[k] = v
    return meta


def dumps(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, object] | None = None) -> bytes:
    meta = encode_metadata(metadata or {})
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(meta)), meta]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        parts.append(_U32.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(d) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    def u32(what: str) -> int:
        return _U32.unpack(take(4, what))[0]

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("not an RPCK checkpoint (bad magic)")
    version = u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = decode_metadata(bytes(take(u32("metadata length"), "metadata")))
    tensors: dict[str, np.ndarray] = {}
    while pos < len(view):
        name = bytes(take(u32("name length"), "name")).decode("utf-8")
        rank = u32(f"rank of {name}")
        shape = tuple(u32(f"extent of {name}") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        payload = take(4 * count, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    return tensors, meta


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, object] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(tensors, metadata))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return loads(Path(path).read_bytes())
