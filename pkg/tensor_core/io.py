"""DTNS binary tensor files: b"DTNS", u32 rank, u32 dims, f64 row-major payload (little-endian)."""

import struct
from pathlib import Path

import numpy as np

from main.exceptions import InputError

from .tensor import Tensor

MAGIC = b"DTNS"


def encode_tensor(value) -> bytes:
    array = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
    header = MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.tobytes(order="C")


def decode_tensor(raw: bytes, path=None) -> np.ndarray:
    if raw[:4] != MAGIC:
        raise InputError("not a DTNS tensor file (bad magic)", path)
    try:
        (rank,) = struct.unpack_from("<I", raw, 4)
        shape = struct.unpack_from(f"<{rank}I", raw, 8)
    except struct.error:
        raise InputError("truncated DTNS header", path)
    offset = 8 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) - offset != 8 * count:
        raise InputError(
            f"DTNS payload holds {len(raw) - offset} bytes, shape {shape} needs {8 * count}",
            path,
        )
    return np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)


def write_tensor(path, value):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_tensor(value))
    except OSError as exc:
        raise InputError(exc.strerror or str(exc), path)


def read_tensor(path, requires_grad=False) -> Tensor:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise InputError(exc.strerror or str(exc), path)
    return Tensor(decode_tensor(raw, path), requires_grad=requires_grad)
