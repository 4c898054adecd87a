"""Binary checkpoint format.

Layout (little-endian)::

    b"MFCK" | u32 version | 32-byte sha256 of the config | u32 record count
    per record: u32 name length | name (utf-8) | u32 rank | u64 dims[rank]
                | u8 dtype code (0 = f32, 1 = f64) | raw payload

The model config is written as canonical JSON to ``<path>.json`` so a
checkpoint can be reopened without knowing its config in advance.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import CheckpointError
from .model import MetaFormer, ModelConfig

MAGIC = b"MFCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def config_path(path) -> Path:
    return Path(str(path) + ".json")


def encode_checkpoint(state: Dict[str, np.ndarray], config_hash: str) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION), bytes.fromhex(config_hash), struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name])
        if arr.dtype not in _CODES:
            raise CheckpointError(f"parameter {name} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(struct.pack("<B", _CODES[arr.dtype]))
        out.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint (wanted {n} bytes at offset {self.pos}, "
                                  f"file has {len(self.buf)})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes, path: str = "<bytes>") -> Tuple[str, Dict[str, np.ndarray]]:
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = r.take(32).hex()
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        (code,) = r.unpack("<B")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: parameter {name} has unknown dtype code {code}")
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        state[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).copy()
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after last record")
    return digest, state


def save_checkpoint(model: MetaFormer, path) -> str:
    """Write parameters and the config sidecar; returns the sha256 of the checkpoint bytes."""
    path = Path(path)
    data = encode_checkpoint(model.state_dict(), model.config.hash())
    path.write_bytes(data)
    config_path(path).write_text(json.dumps(model.config.to_dict(), sort_keys=True, indent=2) + "\n")
    return hashlib.sha256(data).hexdigest()


def read_config(path) -> ModelConfig:
    cp = config_path(path)
    if not cp.exists():
        raise CheckpointError(f"{path}: missing config sidecar {cp}")
    try:
        return ModelConfig.from_dict(json.loads(cp.read_text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{cp}: invalid config ({exc})") from exc


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> MetaFormer:
    """Rebuild a model from ``path``.  ``config`` defaults to the sidecar config."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    config = config if config is not None else read_config(path)
    digest, state = decode_checkpoint(path.read_bytes(), str(path))
    expected = config.hash()
    if digest != expected:
        raise CheckpointError(f"{path}: config hash mismatch (checkpoint {digest}, config {expected})")
    dtypes = {a.dtype for a in state.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.dtype(np.float64)
    with T.default_dtype(dtype.newbyteorder("=")):
        model = MetaFormer(config, seed=0)
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model
