"""
STOI checkpoint files.

Layout (little-endian)::

    b"STOI" | u32 version | u32 n | n bytes UTF-8 JSON config | u64 step
    3 sections (params, optimizer, rng), each: u32 count | count records
    record: u32 path_len | path | u8 dtype | u8 rank | u32 dims[rank] | payload | sha256(record so far)
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .arch import StoicConfig, param_layout
from .diffusion import NoiseSchedule
from .errors import (
    BadMagicError,
    CheckpointError,
    DigestMismatchError,
    IncompatibleCheckpointError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from .params import ParamStore

logger = logging.getLogger(__name__)

MAGIC = b"STOI"
VERSION = 1
DIGEST_BYTES = 32

# dtype tag <-> (torch dtype, little-endian numpy dtype)
_DTYPES: dict[int, tuple[torch.dtype, str]] = {
    0: (torch.float32, "<f4"),
    1: (torch.float64, "<f8"),
    2: (torch.int64, "<i8"),
    3: (torch.uint8, "|u1"),
    4: (torch.int32, "<i4"),
}
_TAGS = {torch_dtype: tag for tag, (torch_dtype, _) in _DTYPES.items()}


@dataclass
class Checkpoint:
    """Everything needed to resume a run or sample from it"""

    model: StoicConfig
    schedule: NoiseSchedule
    hyper: dict[str, Any]
    step: int
    params: ParamStore
    optimizer: dict[str, torch.Tensor] = field(default_factory=dict)
    rng: dict[str, torch.Tensor] = field(default_factory=dict)

    def config_json(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "diffusion": self.schedule.to_dict(),
            "hyper": self.hyper,
        }


def _encode_record(path: str, tensor: torch.Tensor) -> bytes:
    tensor = tensor.detach().contiguous()
    if tensor.dtype not in _TAGS:
        raise CheckpointError(f"{path}: unsupported dtype {tensor.dtype}")
    tag = _TAGS[tensor.dtype]
    name = path.encode("utf-8")
    dims = tuple(tensor.shape)
    payload = tensor.cpu().numpy().astype(_DTYPES[tag][1], copy=False).tobytes()
    body = b"".join([
        struct.pack("<I", len(name)),
        name,
        struct.pack("<BB", tag, len(dims)),
        struct.pack(f"<{len(dims)}I", *dims),
        payload,
    ])
    return body + hashlib.sha256(body).digest()


def _encode_section(tensors: dict[str, torch.Tensor]) -> bytes:
    records = [_encode_record(path, tensors[path]) for path in sorted(tensors)]
    return struct.pack("<I", len(records)) + b"".join(records)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    config = json.dumps(checkpoint.config_json(), sort_keys=True).encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(config)),
        config,
        struct.pack("<Q", checkpoint.step),
        _encode_section(dict(checkpoint.params.items())),
        _encode_section(checkpoint.optimizer),
        _encode_section(checkpoint.rng),
    ])


def save_checkpoint(path: str | os.PathLike, checkpoint: Checkpoint) -> Path:
    """Write ``checkpoint`` atomically (temp file + rename)"""
    path = Path(path)
    data = encode_checkpoint(checkpoint)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as e:
        logger.error(f"Error writing checkpoint {path}: {e}")
        raise
    logger.info(f"saved checkpoint {path} (step {checkpoint.step}, {len(data)} bytes)")
    return path


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise TruncatedCheckpointError(
                f"{self.source}: truncated at byte {len(self.data)} (needed {end})"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_record(reader: _Reader) -> tuple[str, torch.Tensor]:
    start = reader.offset
    (name_len,) = reader.unpack("<I")
    path = reader.take(name_len).decode("utf-8")
    tag, rank = reader.unpack("<BB")
    if tag not in _DTYPES:
        raise CheckpointError(f"{reader.source}: {path} has unknown dtype tag {tag}")
    dims = reader.unpack(f"<{rank}I")
    torch_dtype, np_dtype = _DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = reader.take(count * np.dtype(np_dtype).itemsize)
    body = reader.data[start:reader.offset]
    digest = reader.take(DIGEST_BYTES)
    if hashlib.sha256(body).digest() != digest:
        raise DigestMismatchError(f"{reader.source}: digest mismatch in record {path!r}")
    array = np.frombuffer(payload, dtype=np_dtype).reshape(dims).copy()
    return path, torch.from_numpy(array).to(torch_dtype)


def _decode_section(reader: _Reader) -> dict[str, torch.Tensor]:
    (count,) = reader.unpack("<I")
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        path, tensor = _decode_record(reader)
        if path in tensors:
            raise CheckpointError(f"{reader.source}: duplicate record {path!r}")
        tensors[path] = tensor
    return tensors


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(data, source)
    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise BadMagicError(f"{source}: not a STOI checkpoint (magic {magic!r})")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: checkpoint version {version} is not supported (expected {VERSION})")
    (config_len,) = reader.unpack("<I")
    try:
        config = json.loads(reader.take(config_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: unreadable config block: {e}") from None
    (step,) = reader.unpack("<Q")
    params = _decode_section(reader)
    optimizer = _decode_section(reader)
    rng = _decode_section(reader)
    if reader.offset != len(data):
        raise CheckpointError(f"{source}: {len(data) - reader.offset} trailing bytes")
    return Checkpoint(
        model=StoicConfig.from_dict(config["model"]),
        schedule=NoiseSchedule.from_dict(config["diffusion"]),
        hyper=config.get("hyper", {}),
        step=step,
        params=ParamStore(params),
        optimizer=optimizer,
        rng=rng,
    )


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Read and verify a checkpoint (magic, version, every record digest)"""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        logger.error(f"Error reading checkpoint {path}: {e}")
        raise
    checkpoint = decode_checkpoint(data, str(path))
    logger.info(f"loaded checkpoint {path} (step {checkpoint.step})")
    return checkpoint


def check_compatible(params: ParamStore, config: StoicConfig) -> None:
    """Raise IncompatibleCheckpointError unless ``params`` has exactly the tensors ``config`` builds"""
    expected = {spec.path: spec.shape for spec in param_layout(config)}
    actual = params.shapes()
    missing = sorted(set(expected) - set(actual))
    extra = sorted(set(actual) - set(expected))
    if missing or extra:
        raise IncompatibleCheckpointError(
            f"parameter paths differ: missing {missing[:3]}, unexpected {extra[:3]}"
        )
    for path, shape in expected.items():
        if actual[path] != shape:
            raise IncompatibleCheckpointError(f"{path}: checkpoint shape {actual[path]} != expected {shape}")
