"""
Depth, image and intrinsics files.

- PFM: ``Pf`` (one channel) or ``PF`` (three channels), written little-endian
  with scale −1.0, float32 rows stored bottom-to-top.
- PGM-16: ``P5`` big-endian 16-bit depth with a ``# meters_per_unit <s>``
  header comment.
- PPM: ``P6`` 8-bit RGB images, channel-first in memory with values in [0, 1].
- Intrinsics: JSON object with keys gamma_u, gamma_v, c_u, c_v.
"""

import json
import logging
from pathlib import Path

import numpy as np

from main.exceptions import GeometryError, InputError

from .camera import CameraIntrinsics, DepthMap

logger = logging.getLogger(__name__)

DEFAULT_METERS_PER_UNIT = 0.001
PGM_MAX = 65535


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(exc.strerror or str(exc), path)


def _write_bytes(path, payload: bytes):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as exc:
        raise InputError(exc.strerror or str(exc), path)


def _header(raw: bytes, count: int, path):
    """
    Whitespace-separated header tokens of a Netpbm-style file. Returns the
    tokens, any ``#`` comments, and the offset of the payload.
    """
    tokens, comments, pos = [], [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise InputError("truncated header", path)
        if raw[pos : pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            if end < 0:
                raise InputError("truncated header", path)
            comments.append(raw[pos + 1 : end].decode("ascii", "replace").strip())
            pos = end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii", "replace"))
    # exactly one whitespace byte separates the header from the payload
    return tokens, comments, pos + 1


def _dimensions(tokens, path):
    try:
        width, height = int(tokens[1]), int(tokens[2])
    except ValueError:
        raise InputError(f"bad dimensions {tokens[1:3]}", path)
    if width < 1 or height < 1:
        raise InputError(f"bad dimensions {width}×{height}", path)
    return width, height


def _maxval(tokens, path):
    try:
        maxval = int(tokens[3])
    except ValueError:
        raise InputError(f"bad maxval {tokens[3]!r}", path)
    if not 0 < maxval <= PGM_MAX:
        raise InputError(f"maxval {maxval} out of range", path)
    return maxval


# PFM


def encode_pfm(array) -> bytes:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 2:
        identifier = b"Pf"
        rows = array
    elif array.ndim == 3 and array.shape[0] == 3:
        identifier = b"PF"
        rows = array.transpose(1, 2, 0)
    else:
        raise GeometryError(f"PFM holds H×W or 3×H×W arrays, got {array.shape}")
    height, width = rows.shape[:2]
    header = identifier + f"\n{width} {height}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(np.flipud(rows), dtype="<f4").tobytes()


def decode_pfm(raw: bytes, path=None) -> np.ndarray:
    tokens, _, offset = _header(raw, 4, path)
    if tokens[0] not in ("Pf", "PF"):
        raise InputError(f"not a PFM file (identifier {tokens[0]!r})", path)
    channels = 1 if tokens[0] == "Pf" else 3
    width, height = _dimensions(tokens, path)
    try:
        scale = float(tokens[3])
    except ValueError:
        raise InputError(f"bad PFM scale {tokens[3]!r}", path)
    dtype = "<f4" if scale < 0 else ">f4"
    count = width * height * channels
    if len(raw) - offset != 4 * count:
        raise InputError(f"PFM payload holds {len(raw) - offset} bytes, needs {4 * count}", path)
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).astype(np.float64)
    data = np.flipud(data.reshape(height, width, channels))
    if channels == 1:
        return np.ascontiguousarray(data[:, :, 0])
    return np.ascontiguousarray(data.transpose(2, 0, 1))


def write_pfm(path, array):
    _write_bytes(path, encode_pfm(array.values if isinstance(array, DepthMap) else array))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(_read_bytes(path), path)


# PGM-16


def encode_pgm16(values, meters_per_unit=DEFAULT_METERS_PER_UNIT) -> bytes:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise GeometryError(f"PGM holds H×W arrays, got {values.shape}")
    if not meters_per_unit > 0:
        raise GeometryError(f"meters_per_unit must be positive, got {meters_per_unit}")
    units = np.rint(values / meters_per_unit)
    if np.any(units > PGM_MAX):
        logger.warning(
            f"[PGM] clipping {int(np.sum(units > PGM_MAX))} depth(s) above "
            f"{PGM_MAX * meters_per_unit} m"
        )
    units = np.clip(units, 0, PGM_MAX).astype(">u2")
    height, width = values.shape
    header = f"P5\n# meters_per_unit {meters_per_unit!r}\n{width} {height}\n{PGM_MAX}\n"
    return header.encode("ascii") + units.tobytes()


def decode_pgm16(raw: bytes, path=None) -> np.ndarray:
    tokens, comments, offset = _header(raw, 4, path)
    if tokens[0] != "P5":
        raise InputError(f"not a binary PGM file (identifier {tokens[0]!r})", path)
    width, height = _dimensions(tokens, path)
    maxval = _maxval(tokens, path)
    dtype = ">u2" if maxval > 255 else "u1"
    meters_per_unit = DEFAULT_METERS_PER_UNIT
    for comment in comments:
        key, _, value = comment.partition(" ")
        if key == "meters_per_unit":
            try:
                meters_per_unit = float(value)
            except ValueError:
                raise InputError(f"bad meters_per_unit {value!r}", path)
            break
    else:
        logger.warning(f"[PGM] {path}: no meters_per_unit comment, assuming {meters_per_unit}")
    count = width * height
    itemsize = np.dtype(dtype).itemsize
    if len(raw) - offset != itemsize * count:
        raise InputError(
            f"PGM payload holds {len(raw) - offset} bytes, needs {itemsize * count}", path
        )
    units = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).astype(np.float64)
    return units.reshape(height, width) * meters_per_unit


def write_pgm16(path, depth, meters_per_unit=DEFAULT_METERS_PER_UNIT):
    values = depth.values if isinstance(depth, DepthMap) else depth
    _write_bytes(path, encode_pgm16(values, meters_per_unit))


# PPM


def encode_ppm(image) -> bytes:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise GeometryError(f"PPM holds 3×H×W images, got {image.shape}")
    _, height, width = image.shape
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def decode_ppm(raw: bytes, path=None) -> np.ndarray:
    tokens, _, offset = _header(raw, 4, path)
    if tokens[0] != "P6":
        raise InputError(f"not a binary PPM file (identifier {tokens[0]!r})", path)
    width, height = _dimensions(tokens, path)
    maxval = _maxval(tokens, path)
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height * 3
    itemsize = np.dtype(dtype).itemsize
    if len(raw) - offset != itemsize * count:
        raise InputError(
            f"PPM payload holds {len(raw) - offset} bytes, needs {itemsize * count}", path
        )
    pixels = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).astype(np.float64)
    return pixels.reshape(height, width, 3).transpose(2, 0, 1) / maxval


def write_ppm(path, image):
    _write_bytes(path, encode_ppm(getattr(image, "data", image)))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(_read_bytes(path), path)


# Depth dispatch


def read_depth(path, cls=DepthMap) -> DepthMap:
    """Read a PFM or PGM-16 depth file, chosen by its magic bytes."""
    raw = _read_bytes(path)
    if raw[:2] == b"Pf":
        values = decode_pfm(raw, path)
    elif raw[:2] == b"P5":
        values = decode_pgm16(raw, path)
    else:
        raise InputError("not a PFM (Pf) or PGM (P5) depth file", path)
    try:
        return cls(values)
    except GeometryError as exc:
        raise InputError(str(exc), path)


def write_depth(path, depth):
    if Path(path).suffix.lower() == ".pgm":
        write_pgm16(path, depth)
    else:
        write_pfm(path, depth)


# Intrinsics


def read_intrinsics(path) -> CameraIntrinsics:
    try:
        payload = json.loads(_read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"invalid intrinsics JSON: {exc}", path)
    if not isinstance(payload, dict):
        raise InputError("intrinsics JSON must be an object", path)
    try:
        return CameraIntrinsics.from_dict(payload)
    except GeometryError as exc:
        raise InputError(str(exc), path)


def write_intrinsics(path, intr: CameraIntrinsics):
    _write_bytes(path, (json.dumps(intr.to_dict(), indent=2) + "\n").encode("utf-8"))
