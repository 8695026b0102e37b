"""
Binary checkpoint codec.

Layout (little-endian): magic ``MGMW``, u32 version, u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 rank, ``rank`` x u32 dims and the float64 payload.
"""

import hashlib
import json
import logging
from pathlib import Path
import struct
from typing import Any

import numpy as np

from shared.errors import CheckpointError


logger = logging.getLogger(__name__)

MAGIC = b"MGMW"
VERSION = 1
_HEADER = struct.Struct("<4sII")


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(tensors))]
    for name, value in tensors.items():
        if np.iscomplexobj(value):
            raise CheckpointError(f"tensor '{name}' is complex; store real and imaginary parts separately")
        array = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long ({len(encoded)} bytes)")
        if array.ndim > 0xFF:
            raise CheckpointError(f"tensor '{name}' rank {array.ndim} exceeds 255")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        parts.append(array.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    offset = 0

    def take(size: int) -> memoryview:
        nonlocal offset
        if offset + size > len(view):
            raise CheckpointError(f"truncated checkpoint: need {size} bytes at offset {offset}, have {len(view) - offset}")
        chunk = view[offset : offset + size]
        offset += size
        return chunk

    magic, version, count = _HEADER.unpack(take(_HEADER.size))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"tensor name is not valid UTF-8: {e}") from e
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name '{name}'")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = np.frombuffer(take(8 * size), dtype="<f8")
        tensors[name] = payload.astype(np.float64).reshape(shape)
    if offset != len(view):
        raise CheckpointError(f"{len(view) - offset} trailing bytes after {count} tensors")
    return tensors


def save_checkpoint(tensors: dict[str, np.ndarray], path: Path | str, descriptor: dict[str, Any] | None = None) -> Path:
    """
    Write ``tensors`` to ``path``; ``descriptor`` (if given) goes to a ``.json`` sidecar.

    Returns:
        The checkpoint path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(tensors))
    if descriptor is not None:
        sidecar_path(path).write_text(json.dumps(descriptor, sort_keys=True, indent=2), encoding="utf-8")
    logger.debug(f"Saved {len(tensors)} tensors to {path}")
    return path


def load_checkpoint(path: Path | str) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    return decode_checkpoint(path.read_bytes())


def sidecar_path(path: Path | str) -> Path:
    return Path(path).with_suffix(".json")


def load_descriptor(path: Path | str) -> dict[str, Any]:
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        raise CheckpointError(f"missing architecture descriptor {sidecar}")
    try:
        return json.loads(sidecar.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable descriptor {sidecar}: {e}") from e


def content_hash(path: Path | str) -> str:
    """git-style blob hash of a checkpoint file."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def save_module(module, path: Path | str, descriptor: dict[str, Any]) -> Path:
    return save_checkpoint(module.state_dict(), path, descriptor)


def load_module_state(path: Path | str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    return load_descriptor(path), load_checkpoint(path)
