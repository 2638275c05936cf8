"""Binary checkpoint format.

Little-endian layout::

    b"SCPE"            magic
    u32                format version (1)
    u32 + bytes        model config as key=value text (UTF-8)
    32 bytes           SHA-256 of that config text
    u32                number of tensors
    per tensor, sorted by name:
        u16 + bytes    name (UTF-8)
        u8             ndim
        u32 * ndim     shape
        f64 * prod     row-major data
"""
from __future__ import annotations

import hashlib
import io
import struct

import numpy as np

from .model import ModelConfig, ScapeModel

MAGIC = b"SCPE"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigMismatch(CheckpointError):
    def __init__(self, expected: str, found: str):
        super().__init__(f"checkpoint config hash {found} does not match run config hash {expected}")
        self.expected = expected
        self.found = found


def encode(config_text: str, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    cfg = config_text.encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(hashlib.sha256(cfg).digest())
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode(blob: bytes) -> tuple[str, str, dict[str, np.ndarray]]:
    """Return ``(config_text, config_hash_hex, tensors)``."""
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_cfg,) = struct.unpack("<I", take(4))
    cfg = take(n_cfg)
    digest = take(32)
    if hashlib.sha256(cfg).digest() != digest:
        raise CheckpointError("config block does not match its stored hash")
    (n,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint")
    return cfg.decode(), digest.hex(), tensors


def save(model: ScapeModel, path) -> bytes:
    blob = encode(model.cfg.to_text(), model.state_dict())
    with open(path, "wb") as f:
        f.write(blob)
    return blob


def load(path, expected: ModelConfig | None = None) -> ScapeModel:
    """Rebuild a model from ``path``; refuse if ``expected`` hashes differently."""
    with open(path, "rb") as f:
        text, digest, tensors = decode(f.read())
    if expected is not None and expected.hash() != digest:
        raise ConfigMismatch(expected.hash(), digest)
    model = ScapeModel(ModelConfig.from_text(text))
    model.load_state_dict(tensors)
    return model
