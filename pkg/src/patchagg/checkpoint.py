"""Binary checkpoint container.

Layout: ``b"PAGG"``, u32 version, u64 header length, UTF-8 JSON header, then
the raw little-endian float32 payload. The header lists every tensor's name,
shape and byte offset into the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PAGG"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: dict = field(default_factory=dict)

    @property
    def config(self) -> dict:
        return self.header.get("config", {})

    def params(self, prefix: str = "model/") -> dict:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def encode(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = dict(ckpt.header)
    header["tensors"] = entries
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def decode(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{source}: file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise CheckpointError(f"{source}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from exc
    payload = memoryview(raw)[start + hlen:]
    tensors = {}
    for e in header.pop("tensors", []):
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 4 * n or e["offset"] + e["nbytes"] > len(payload):
            raise CheckpointError(f"{source}: tensor {e['name']} is truncated or inconsistent")
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return Checkpoint(header, tensors)


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes(), str(path))
