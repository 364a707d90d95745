"""Netpbm PGM (P2/P5) and PPM (P3/P6) reading and writing."""

from __future__ import annotations

import numpy as np

_WHITESPACE = b" \t\n\r\v\f"


class NetpbmError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos : pos + 1] not in _WHITESPACE and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise NetpbmError("truncated header", start)
    return buf[start:pos], pos


def _header_int(buf: bytes, pos: int, what: str) -> tuple[int, int]:
    token, end = _header_token(buf, pos)
    if not token.isdigit():
        raise NetpbmError(f"invalid {what} {token!r}", end - len(token))
    return int(token), end


def read_netpbm(buf: bytes) -> tuple[np.ndarray, int]:
    """Parse a P2/P3/P5/P6 image.

    Returns the raw integer raster ([H,W] or [H,W,3]) and its maxval.
    """
    if len(buf) < 2:
        raise NetpbmError("file too short for a magic number", 0)
    magic = buf[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r}", 0)
    width, pos = _header_int(buf, 2, "width")
    height, pos = _header_int(buf, pos, "height")
    maxval, pos = _header_int(buf, pos, "maxval")
    if width < 1 or height < 1:
        raise NetpbmError("image extents must be positive", pos)
    if not 0 < maxval < 65536:
        raise NetpbmError(f"maxval {maxval} out of range", pos)
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = width * height * channels
    shape = (height, width, 3) if channels == 3 else (height, width)

    if magic in (b"P5", b"P6"):
        if pos >= len(buf) or buf[pos : pos + 1] not in _WHITESPACE:
            raise NetpbmError("missing whitespace before raster", pos)
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        if len(buf) - pos < need:
            raise NetpbmError(f"truncated raster: need {need} bytes, have {len(buf) - pos}", len(buf))
        raster = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).astype(np.int64)
        over = np.flatnonzero(raster > maxval)
        if over.size:
            raise NetpbmError(f"sample exceeds maxval {maxval}", pos + int(over[0]) * dtype.itemsize)
    else:
        values = []
        for _ in range(count):
            v, end = _header_int(buf, pos, "sample")
            if v > maxval:
                raise NetpbmError(f"sample {v} exceeds maxval {maxval}", end - len(str(v)))
            values.append(v)
            pos = end
        raster = np.array(values, dtype=np.int64)
    return raster.reshape(shape), maxval


def decode_image(buf: bytes):
    """Decode a grayscale PGM into a [1,H,W] tensor of 0-255 intensities.

    Samples with a maxval other than 255 are mapped linearly onto 0-255.
    """
    from .tensor import Tensor

    if buf[:2] not in (b"P2", b"P5"):
        raise NetpbmError(f"expected a grayscale PGM (P2/P5), got magic {bytes(buf[:2])!r}", 0)
    raster, maxval = read_netpbm(buf)
    values = raster.astype(np.float64)
    if maxval != 255:
        values = values * (255.0 / maxval)
    return Tensor(values[None, :, :])


def _as_u8(values: np.ndarray) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255):
            raise ValueError("image values must lie in 0-255")
        arr = np.rint(arr).astype(np.uint8)
    return arr


def encode_pgm(values: np.ndarray, plain: bool = False) -> bytes:
    arr = _as_u8(values)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {arr.shape}")
    h, w = arr.shape
    if plain:
        rows = "\n".join(" ".join(str(v) for v in row) for row in arr)
        return f"P2\n{w} {h}\n255\n{rows}\n".encode("ascii")
    return f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def encode_ppm(values: np.ndarray) -> bytes:
    arr = _as_u8(values)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM needs an [H,W,3] array, got shape {arr.shape}")
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()
