"""Binary PGM (P5) and PPM (P6) files, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DatasetError


def write(path, data: np.ndarray) -> None:
    """Write a uint8 array of shape (H, W) as P5 or (H, W, 3) as P6."""
    arr = np.asarray(data)
    if arr.dtype != np.uint8:
        raise ValueError(f"netpbm writer needs uint8 data, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"unsupported array shape {arr.shape}")
    h, w = arr.shape[:2]
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def _tokens(buf: bytes, count: int):
    # header tokens separated by whitespace; '#' starts a comment to end of line
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ValueError("truncated header")
        if buf[pos:pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read(path) -> np.ndarray:
    """Read a P5/P6 file into a uint8 array; raises DatasetError naming the file."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        (magic, w, h, maxval), offset = _tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed netpbm header ({exc})") from exc
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{path}: unsupported netpbm type {magic!r}")
    if maxval != 255:
        raise DatasetError(f"{path}: maxval must be 255, got {maxval}")
    if w < 1 or h < 1:
        raise DatasetError(f"{path}: bad dimensions {w}x{h}")
    channels = 1 if magic == b"P5" else 3
    expected = w * h * channels
    raster = buf[offset:offset + expected]
    if len(raster) != expected:
        raise DatasetError(f"{path}: raster truncated ({len(raster)} of {expected} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return arr.reshape(shape).copy()
