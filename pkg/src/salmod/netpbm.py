"""Binary PGM (P5) and PPM (P6) reading and writing, maxval 255 only."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _header_tokens(buf: bytes, count: int, path) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise NetpbmError(f"{path}: truncated header")
        tokens.append(buf[start:i])
    # exactly one whitespace byte separates maxval from the raster
    if i >= n or not buf[i:i + 1].isspace():
        raise NetpbmError(f"{path}: malformed header")
    return tokens, i + 1


def read_pnm(path) -> np.ndarray:
    """Return ``uint8`` array: ``[H, W]`` for P5, ``[H, W, 3]`` for P6."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise NetpbmError(f"{path}: cannot read ({exc})") from exc
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: unsupported magic {magic!r}")
    try:
        tokens, offset = _header_tokens(buf[2:], 3, path)
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise NetpbmError(f"{path}: malformed header ({exc})") from exc
    if width < 1 or height < 1:
        raise NetpbmError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise NetpbmError(f"{path}: maxval {maxval} unsupported (need 255)")
    channels = 3 if magic == b"P6" else 1
    raster = buf[2 + offset:]
    expected = width * height * channels
    if len(raster) < expected:
        raise NetpbmError(f"{path}: raster has {len(raster)} bytes, expected {expected}")
    arr = np.frombuffer(raster[:expected], dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).copy()


def write_pnm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise NetpbmError("pixels must be uint8")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"cannot write array of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(pixels).tobytes())


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Quantize values in [0, 1] to bytes, ``round(255 * v)``."""
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
