"""
Module: services.checkpoint_service
-----------------------------------

Checkpoints and the POCC file format.

Layout (little-endian):
    "POCC" | version u32 | meta length u32 | meta JSON {config, step, rng_state}
    | tensor count u32 | per tensor: name length u16, name bytes, dtype u8 (0 = f32),
    rank u8, dims u32 × rank, row-major payload

Parameters are rounded to float32 when a checkpoint is built, so an
in-memory checkpoint and its reloaded copy evaluate identically. Loading
parses the whole file before returning anything.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from app.schemas.config import ExperimentConfig
from app.services.model_service import ModelParams, init_model
from app.utils.errors import ConfigError, FormatError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"POCC"
CHECKPOINT_VERSION = 1
DTYPE_F32 = 0


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    config: ExperimentConfig
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def from_model(
        cls,
        model: ModelParams,
        config: ExperimentConfig,
        step: int,
        rng_state: Optional[dict] = None,
    ) -> "Checkpoint":
        named = model.named_parameters()
        params = {name: tensor.data.astype(np.float32) for name, tensor in named.items()}
        return cls(params, config, step, _jsonable(rng_state or {}))

    def to_model(self) -> ModelParams:
        model = init_model(self.config, self.config.seed)
        model.load_named(self.params)
        return model


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def restore_rng(state: dict) -> np.random.Generator:
    """Rebuild the Philox generator recorded in a checkpoint."""
    bit_generator = np.random.Philox()
    restored = json.loads(json.dumps(state))
    inner = restored["state"]
    inner["counter"] = np.asarray(inner["counter"], dtype=np.uint64)
    inner["key"] = np.asarray(inner["key"], dtype=np.uint64)
    restored["buffer"] = np.asarray(restored["buffer"], dtype=np.uint64)
    bit_generator.state = restored
    return np.random.Generator(bit_generator)


# --------------------------
# Encoding
# --------------------------


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(
        {
            "config": json.loads(ckpt.config.to_json(indent=None)),
            "step": ckpt.step,
            "rng_state": ckpt.rng_state,
        }
    ).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(meta)),
        meta,
        struct.pack("<I", len(ckpt.params)),
    ]
    for name, array in ckpt.params.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(array, dtype="<f4")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", DTYPE_F32, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.blob):
            raise FormatError(f"POCC file truncated while reading {what}")
        chunk = self.blob[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    reader = _Reader(blob)
    if reader.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a POCC checkpoint (bad magic)")
    version, meta_length = reader.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported POCC version {version}")
    try:
        meta = json.loads(reader.take(meta_length, "metadata"))
        config = ExperimentConfig.model_validate(meta["config"])
    except (ValueError, KeyError) as e:
        raise FormatError(f"invalid checkpoint metadata: {e}")

    (count,) = reader.unpack("<I", "tensor count")
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H", "tensor name")
        name = reader.take(name_length, "tensor name").decode("utf-8")
        dtype, rank = reader.unpack("<BB", f"{name} header")
        if dtype != DTYPE_F32:
            raise FormatError(f"{name}: unsupported dtype code {dtype}")
        dims = reader.unpack(f"<{rank}I", f"{name} dims")
        size = int(np.prod(dims)) * 4
        payload = reader.take(size, f"{name} payload")
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if reader.offset != len(blob):
        raise FormatError(f"{len(blob) - reader.offset} trailing bytes after the last tensor")
    return Checkpoint(params, config, int(meta.get("step", 0)), meta.get("rng_state", {}))


# --------------------------
# Files
# --------------------------


def check_config_compatible(ckpt: Checkpoint, config: ExperimentConfig) -> None:
    """Raise ConfigError naming the first field where the two disagree."""
    pairs = [
        ("scene.grid", ckpt.config.scene.grid, config.scene.grid),
        ("scene.num_classes", ckpt.config.scene.num_classes, config.scene.num_classes),
        ("model.query_grid", ckpt.config.model.query_grid, config.model.query_grid),
        ("model.d", ckpt.config.model.d, config.model.d),
        ("model.encoder_layers", ckpt.config.model.encoder_layers, config.model.encoder_layers),
    ]
    for name, stored, expected in pairs:
        if tuple(np.atleast_1d(stored)) != tuple(np.atleast_1d(expected)):
            raise ConfigError(f"checkpoint has {stored}, expected {expected}", field=name)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))
    logger.info(f"Saved checkpoint with {len(ckpt.params)} tensors to {path}")


def load_checkpoint(
    path: Union[str, Path], config: Optional[ExperimentConfig] = None
) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if config is not None:
        check_config_compatible(ckpt, config)
    return ckpt
