"""Binary formats: single tensors ("FGT1") and named-tensor checkpoints ("FGCK").

Tensor::

    b"FGT1" | u32 rank | rank x u32 dims | prod(dims) x f32      (all little-endian)

Checkpoint::

    b"FGCK" | u32 version | u32 count | count x (u32 name_len | name utf-8 | Tensor)
"""
from __future__ import annotations

import io
import struct
from collections import OrderedDict
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"FGT1"
CHECKPOINT_MAGIC = b"FGCK"
CHECKPOINT_VERSION = 1

_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    buf = stream.read(n)
    if buf is None or len(buf) != n:
        got = 0 if buf is None else len(buf)
        raise FormatError(f"truncated {what}: expected {n} bytes, got {got}")
    return buf


def write_tensor(stream: BinaryIO, array) -> None:
    arr = np.asarray(array, dtype=_F32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    stream.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = _read_exact(stream, 4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4, "tensor rank"))
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, "tensor dims"))
    if any(d < 1 for d in dims):
        raise FormatError(f"tensor dims must be >= 1, got {list(dims)}")
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(stream, 4 * count, "tensor payload")
    return np.frombuffer(payload, dtype=_F32).astype(np.float32).reshape(dims)


def tensor_to_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def write_checkpoint(stream: BinaryIO, params: Mapping[str, np.ndarray]) -> None:
    stream.write(CHECKPOINT_MAGIC)
    stream.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        stream.write(struct.pack("<I", len(raw)))
        stream.write(raw)
        write_tensor(stream, arr)


def read_checkpoint(stream: BinaryIO) -> "OrderedDict[str, np.ndarray]":
    magic = _read_exact(stream, 4, "checkpoint magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version, count = struct.unpack("<II", _read_exact(stream, 8, "checkpoint header"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint version mismatch: expected {CHECKPOINT_VERSION}, got {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(stream, 4, "entry name length"))
        name = _read_exact(stream, n, "entry name").decode("utf-8")
        out[name] = read_tensor(stream)
    return out


def checkpoint_to_bytes(params: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(buf, params)
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> "OrderedDict[str, np.ndarray]":
    stream = io.BytesIO(data)
    out = read_checkpoint(stream)
    if stream.tell() != len(data):
        raise FormatError(f"trailing bytes after checkpoint: {len(data) - stream.tell()}")
    return out


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, params)


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return read_checkpoint(fh)
