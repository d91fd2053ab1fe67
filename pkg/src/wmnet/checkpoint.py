"""Single-file checkpoint container.

Layout, all integers little-endian::

    b"WMNETCK1"
    u32 len, config text (utf-8, key=value lines)
    u32 len, metric history (utf-8 JSON list)
    u32 array count
    per array: u16 name len, name, u8 ndim, ndim x u32 dims, float32 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, List

import numpy as np
import torch

MAGIC = b"WMNETCK1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    arrays: Dict[str, np.ndarray]
    history: List[dict] = field(default_factory=list)

    def state_dict(self) -> Dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.arrays.items()}


def from_module(module: torch.nn.Module, config_text: str, history: List[dict]) -> Checkpoint:
    arrays = {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in module.state_dict().items()}
    return Checkpoint(config_text, arrays, list(history))


def _write_block(fh: BinaryIO, data: bytes) -> None:
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def save(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_block(fh, ckpt.config_text.encode())
        _write_block(fh, json.dumps(ckpt.history).encode())
        fh.write(struct.pack("<I", len(ckpt.arrays)))
        for name, arr in ckpt.arrays.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a wmnet checkpoint")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        config_text = _read_exact(fh, n).decode()
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        history = json.loads(_read_exact(fh, n).decode())
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, n).decode()
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4")
            arrays[name] = data.reshape(shape).astype(np.float32)
    return Checkpoint(config_text, arrays, history)
