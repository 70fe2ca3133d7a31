"""Binary model container.

Layout (little endian)::

    magic      4 bytes  b"MQMD"
    version    u32
    config     u32 length + UTF-8 JSON (ModelConfig)
    stats      u32 length + statistics block (empty when the model has none)
    weights    u64 count + float64 values
    checksum   32 bytes SHA-256 over everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..dsp import stats_from_bytes, stats_to_bytes
from .config import ModelConfig
from .network import MOSModel
from .params import ModelParameters

MAGIC = b"MQMD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_model(model: MOSModel, path) -> None:
    config_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    stats_blob = stats_to_bytes(model.stats) if model.stats is not None else b""
    weights = np.asarray(model.params.flat, dtype="<f8")
    body = b"".join([
        MAGIC, struct.pack("<I", VERSION),
        struct.pack("<I", len(config_blob)), config_blob,
        struct.pack("<I", len(stats_blob)), stats_blob,
        struct.pack("<Q", weights.size), weights.tobytes(),
    ])
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_model(path) -> MOSModel:
    raw = Path(path).read_bytes()
    if len(raw) < 8 + 32 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a model file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    pos = 8
    (n,) = struct.unpack_from("<I", body, pos)
    config = ModelConfig.from_dict(json.loads(body[pos + 4:pos + 4 + n]))
    pos += 4 + n
    (n,) = struct.unpack_from("<I", body, pos)
    stats = stats_from_bytes(body[pos + 4:pos + 4 + n]) if n else None
    pos += 4 + n
    (count,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    weights = np.frombuffer(body[pos:pos + 8 * count], dtype="<f8").astype(np.float64)
    if weights.size != count or pos + 8 * count != len(body):
        raise CheckpointError(f"{path}: weight block length mismatch")
    return MOSModel(config, ModelParameters(config, weights), stats)
