"""Binary PGM (P5) / PPM (P6) reading and writing, maxval 255."""

from __future__ import annotations

import os

import numpy as np


def write_pgm(path, array) -> None:
    """Write a 2-D uint8 array as binary P5."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ValueError(f"PGM expects a 2-D array, got shape {arr.shape}")
    _write(path, b"P5", arr.shape[1], arr.shape[0], _to_u8(arr))


def write_ppm(path, array) -> None:
    """Write an [H, W, 3] uint8 array as binary P6."""
    arr = np.asarray(array)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM expects an [H, W, 3] array, got shape {arr.shape}")
    _write(path, b"P6", arr.shape[1], arr.shape[0], _to_u8(arr))


def read_netpbm(path) -> np.ndarray:
    """Read a binary P5 or P6 file; returns uint8 [H, W] or [H, W, 3]."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    fields, offset = _parse_header(raw, path)
    magic, width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    count = width * height * channels
    body = raw[offset : offset + count]
    if len(body) != count:
        raise ValueError(f"{path}: truncated pixel data ({len(body)} of {count} bytes)")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(height, width, 3) if channels == 3 else arr.reshape(height, width)


def _to_u8(arr: np.ndarray) -> np.ndarray:
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating):
            raise ValueError("pass uint8 data; quantise float images before writing")
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return np.ascontiguousarray(arr)


def _write(path, magic: bytes, width: int, height: int, arr: np.ndarray) -> None:
    header = magic + b"\n%d %d\n255\n" % (width, height)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(header)
            f.write(arr.tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _parse_header(raw: bytes, path) -> tuple[tuple, int]:
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
    values = []
    pos = 2
    while len(values) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise ValueError(f"{path}: truncated header")
        if raw[pos : pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: malformed header")
        values.append(int(raw[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    return (magic, values[0], values[1], values[2]), pos + 1
