# models/checkpoint.py
"""
ATNF checkpoint codec.

Layout (all integers little-endian)::

    b"ATNF" | u32 version | u32 n + n bytes ModelConfig JSON (UTF-8)
    then per tensor: u32 n + n bytes name | f64 data

Tensors follow ``ModelParams.named_parameters()`` order and carry no shape;
the reader rebuilds every shape from the config. A tied decoder is stored
once, under the token embedding. Data is always f64, so a float32 model
loads back as float64 with the same values. ``steps_trained`` is not stored.
"""

import json
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Tuple

import numpy as np
from pydantic import ValidationError

from config.errors import CheckpointError
from config.settings import ModelConfig
from models.encoder import ModelParams, build_model

logger = logging.getLogger(__name__)

MAGIC = b"ATNF"
FORMAT_VERSION = 1
_F64 = np.dtype("<f8")


def _write_str(handle: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    handle.write(struct.pack("<I", len(raw)))
    handle.write(raw)


def save_checkpoint(params: ModelParams, path: str) -> Path:
    """Write ``params`` to ``path``; returns the path written."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    named = params.named_parameters()
    with open(out, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<I", FORMAT_VERSION))
        _write_str(handle, params.config.model_dump_json())
        for name, tensor in named:
            _write_str(handle, name)
            handle.write(np.ascontiguousarray(tensor.data, dtype=_F64).tobytes())
    logger.info(f"Saved checkpoint with {len(named)} tensors to {out}")
    return out


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated checkpoint at byte {self.offset}")
        chunk = self.raw[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (size,) = self.unpack("<I")
        try:
            return self.take(size).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{self.source}: invalid UTF-8 string at byte {self.offset}")


def load_checkpoint(path: str) -> ModelParams:
    """Read a checkpoint written by ``save_checkpoint``.

    The config is decoded first and a zero model is built from it; tensor
    blocks are then read in that model's declaration order.

    Raises:
        CheckpointError: On bad magic, unsupported version, truncation,
            trailing bytes or tensor names that do not match the stored config.
    """
    source = str(path)
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {source}: {e}")

    reader = _Reader(raw, source)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{source}: not an ATNF checkpoint")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    try:
        config = ModelConfig(**json.loads(reader.string()))
    except (ValueError, ValidationError) as e:
        raise CheckpointError(f"{source}: invalid model config: {e}")

    params = build_model(config, lambda name, shape, kind: np.zeros(shape, dtype=np.float64))
    named = params.named_parameters()
    for expected, tensor in named:
        if reader.offset == len(raw):
            raise CheckpointError(f"{source}: missing tensor '{expected}'")
        name = reader.string()
        if name != expected:
            raise CheckpointError(f"{source}: found tensor '{name}' where '{expected}' was expected")
        data = np.frombuffer(reader.take(tensor.size * _F64.itemsize), dtype=_F64)
        tensor.data = data.astype(np.float64).reshape(tensor.shape)
    if reader.offset != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - reader.offset} trailing bytes")
    logger.info(f"Loaded {config.variant.value} checkpoint from {source} ({len(named)} tensors)")
    return params
