"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"ALMAFORGE"                 magic, 9 bytes
    u32                          format version
    u64 + bytes                  JSON metadata (UTF-8)
    u32                          number of arrays
    per array: u16 + name, u8 + dtype string, u8 ndim, u64 * ndim shape, u64 offset
    raw array bytes              offsets are relative to the start of this block

Model parameters use their plain names; LoRA factors live under ``lora/``.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ALMAFORGE"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    tensors: dict  # name -> np.ndarray (float32)
    step: int = 0
    train_digest: dict = field(default_factory=dict)
    val_history: list = field(default_factory=list)  # [[step, val_loss], ...]
    meta: dict = field(default_factory=dict)

    @property
    def base_names(self):
        return [n for n in self.tensors if not n.startswith("lora/")]

    @property
    def lora_names(self):
        return [n for n in self.tensors if n.startswith("lora/")]

    def metadata(self):
        return {"model_config": self.model_config, "step": self.step, "train_digest": self.train_digest,
                "val_history": self.val_history, "meta": self.meta}


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata(), sort_keys=True).encode("utf-8")
    table, blobs, offset = io.BytesIO(), [], 0
    table.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)  # ascontiguousarray would turn 0-d into shape (1,)
        if arr.dtype != np.float32:
            raise CheckpointError(f"array {name!r} has dtype {arr.dtype}; the container stores float32")
        data = arr.astype("<f4", copy=False).tobytes()
        nb, db = name.encode("utf-8"), b"<f4"
        table.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(db)) + db)
        table.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        table.write(struct.pack("<Q", offset))
        blobs.append(data)
        offset += len(data)
    head = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(meta)) + meta
    return head + table.getvalue() + b"".join(blobs)


def from_bytes(buf: bytes) -> Checkpoint:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint: unexpected end of file")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    head = bytes(view[:len(MAGIC)])
    if not MAGIC.startswith(head) or not head:
        raise CheckpointError("not a checkpoint: bad magic (expected ALMAFORGE header)")
    take(len(MAGIC))
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    (mlen,) = struct.unpack("<Q", take(8))
    try:
        meta = json.loads(bytes(take(mlen)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(count):
        (nl,) = struct.unpack("<H", take(2))
        name = bytes(take(nl)).decode("utf-8")
        (dl,) = struct.unpack("<B", take(1))
        dtype = bytes(take(dl)).decode("ascii")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (offset,) = struct.unpack("<Q", take(8))
        entries.append((name, dtype, shape, offset))
    data_start = pos
    tensors = {}
    for name, dtype, shape, offset in entries:
        if dtype != "<f4":
            raise CheckpointError(f"array {name!r} has unsupported dtype {dtype}")
        n = int(np.prod(shape)) * 4
        start = data_start + offset
        if start + n > len(view):
            raise CheckpointError(f"truncated checkpoint: array {name!r} runs past end of file")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=n // 4, offset=start).astype(np.float32).reshape(shape)
    return Checkpoint(meta["model_config"], tensors, meta["step"], meta.get("train_digest", {}),
                      meta.get("val_history", []), meta.get("meta", {}))


def save(ckpt: Checkpoint, path):
    """Write atomically (temp file + rename) so a crash never leaves half a file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
