"""VOL1 raw volumes, PGM slice images and atomic file writes.

VOL1 layout: ``b"VOL1"``, three little-endian uint32 extents ``(x, y, z)``,
then ``x*y*z`` little-endian float32 values in C order (z fastest).
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError, InvalidSliceError

VOL1_MAGIC = b"VOL1"
_VOL1_HEADER = struct.Struct("<4sIII")


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text):
    return atomic_write_bytes(path, text.encode("utf-8"))


def vol1_bytes(volume):
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise GeometryError(f"VOL1 holds 3D volumes, got shape {volume.shape}")
    header = _VOL1_HEADER.pack(VOL1_MAGIC, *volume.shape)
    return header + np.ascontiguousarray(volume, dtype="<f4").tobytes()


def write_vol1(path, volume):
    return atomic_write_bytes(path, vol1_bytes(volume))


def parse_vol1(data):
    if len(data) < _VOL1_HEADER.size:
        raise FormatError("truncated VOL1 header", len(data))
    magic, x, y, z = _VOL1_HEADER.unpack_from(data)
    if magic != VOL1_MAGIC:
        raise FormatError(f"bad VOL1 magic {magic!r}", 0)
    expected = _VOL1_HEADER.size + 4 * x * y * z
    if len(data) != expected:
        raise FormatError(f"VOL1 payload holds {len(data) - _VOL1_HEADER.size} bytes, "
                          f"expected {4 * x * y * z}", min(len(data), expected))
    return np.frombuffer(data, dtype="<f4", offset=_VOL1_HEADER.size).reshape(x, y, z).astype(np.float32)


def read_vol1(path):
    return parse_vol1(Path(path).read_bytes())


def slice_of(volume, axis, index):
    volume = np.asarray(volume)
    axis = {"x": 0, "y": 1, "z": 2}.get(axis, axis)
    if axis not in (0, 1, 2):
        raise InvalidSliceError(f"axis must be x, y or z, got {axis!r}")
    if not 0 <= index < volume.shape[axis]:
        raise InvalidSliceError(f"slice index {index} outside [0, {volume.shape[axis]})")
    return np.take(volume, index, axis=axis)


def scale_slice(image, scaling="minmax"):
    """Map a 2D array to bytes. ``minmax`` stretches to 0..255 (a constant image
    maps to 0); ``symmetric`` maps 0 to 128 and the largest magnitude to 1 or 255."""
    img = np.asarray(image, dtype=np.float64)
    if scaling == "minmax":
        lo, hi = img.min(), img.max()
        if hi == lo:
            return np.zeros(img.shape, dtype=np.uint8)
        return np.round((img - lo) / (hi - lo) * 255.0).astype(np.uint8)
    if scaling in ("symmetric", "symmetricZero"):
        peak = np.abs(img).max()
        if peak == 0:
            return np.full(img.shape, 128, dtype=np.uint8)
        return np.round(128.0 + 127.0 * img / peak).astype(np.uint8)
    raise ValueError(f"unknown scaling {scaling!r}")


def pgm_bytes(image):
    """Binary PGM (P5); rows of the array become image rows."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise GeometryError(f"PGM needs a 2D image, got shape {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def parse_pgm(data):
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError("not a binary PGM", 0)
    w, h = (int(v) for v in parts[1].split())
    pixels = parts[3]
    if len(pixels) != w * h:
        raise FormatError("truncated PGM pixel data", len(data))
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def export_slices(volume, axis, indices, scaling="minmax"):
    """One scaled 2D slice per index; returns a list of uint8 images."""
    return [scale_slice(slice_of(volume, axis, int(i)), scaling) for i in indices]


def write_pgm(path, image):
    return atomic_write_bytes(path, pgm_bytes(image))
