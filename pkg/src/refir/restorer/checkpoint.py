"""Checkpoint container.

Layout, all integers little-endian::

    b"RFCK" | u16 version (=1) | u32 n + n bytes UTF-8 JSON (config echo + metadata)
    | u32 tensor count | per tensor: u16 name length + UTF-8 name, u8 ndim,
      ndim x u32 dims, prod(dims) x float32 (IEEE-754 LE)

Tensors appear in ``state_dict`` order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, ToyRestorer

MAGIC = b"RFCK"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(model: ToyRestorer, path, metadata: dict | None = None) -> None:
    header = json.dumps({"config": model.cfg.to_dict(), "metadata": metadata or {}},
                        sort_keys=True).encode("utf-8")
    state = model.state_dict()
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(header)), header,
             struct.pack("<I", len(state))]
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[ToyRestorer, dict]:
    """Rebuild the model from a checkpoint; returns ``(model, metadata)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def unpack(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (version,) = unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {VERSION}")
    (hlen,) = unpack("<I")
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    model = ToyRestorer(ModelConfig(**header["config"]))
    (count,) = unpack("<I")
    state = {}
    for _ in range(count):
        (nlen,) = unpack("<H")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = unpack("<B")
        shape = unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        if pos + 4 * n > len(data):
            raise CheckpointError(f"{path}: truncated in tensor {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        state[name] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return model, header["metadata"]
