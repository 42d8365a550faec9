"""Flat binary tensor container.

Layout: header (magic, version, tensor count), then per tensor a name length,
the utf-8 name, the rank, the dims, and the elements as little-endian 64-bit
floats. The same per-tensor record is reused by the external evaluator
protocol, so files and wire frames stay bit-compatible.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

MAGIC = 0x45515431  # "EQT1"
VERSION = 1

_U32 = struct.Struct("<I")


class FormatError(ValueError):
    """Malformed or truncated tensor container."""


def _write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(_U32.pack(value))


def _read_u32(fh: BinaryIO) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError("truncated stream while reading u32")
    return _U32.unpack(raw)[0]


def pack_tensor(fh: BinaryIO, name: str, array: np.ndarray) -> None:
    """Append one named tensor record to a binary stream."""
    data = np.ascontiguousarray(array, dtype="<f8")
    encoded = name.encode("utf-8")
    _write_u32(fh, len(encoded))
    fh.write(encoded)
    _write_u32(fh, data.ndim)
    for dim in data.shape:
        _write_u32(fh, dim)
    fh.write(data.tobytes())


def unpack_tensor(fh: BinaryIO) -> tuple[str, np.ndarray]:
    """Read one named tensor record written by pack_tensor."""
    name_len = _read_u32(fh)
    name = fh.read(name_len).decode("utf-8")
    rank = _read_u32(fh)
    shape = tuple(_read_u32(fh) for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise FormatError(f"truncated tensor data for {name!r}")
    array = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return name, array


def dump_tensors(fh: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    _write_u32(fh, MAGIC)
    _write_u32(fh, VERSION)
    _write_u32(fh, len(tensors))
    for name, array in tensors.items():
        pack_tensor(fh, name, array)


def load_tensors_stream(fh: BinaryIO) -> dict[str, np.ndarray]:
    magic = _read_u32(fh)
    if magic != MAGIC:
        raise FormatError(f"bad magic 0x{magic:08x}")
    version = _read_u32(fh)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    count = _read_u32(fh)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, array = unpack_tensor(fh)
        out[name] = array
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write a dict of named float64 tensors to a container file."""
    with open(path, "wb") as fh:
        dump_tensors(fh, tensors)


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a container file back into a dict of float64 arrays."""
    with open(path, "rb") as fh:
        return load_tensors_stream(fh)


def tensors_to_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    dump_tensors(buf, tensors)
    return buf.getvalue()


def tensors_from_bytes(blob: bytes) -> dict[str, np.ndarray]:
    return load_tensors_stream(io.BytesIO(blob))
