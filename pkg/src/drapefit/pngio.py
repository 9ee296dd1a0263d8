"""Minimal PNG and PFM writers for debug dumps (atlas images, PDF heatmaps).

Only what the debug paths need: 8/16-bit gray/RGB/RGBA PNG without
interlacing, and single-channel little-endian PFM float grids. A matching
reader is included so round-trips can be verified without extra
dependencies.
"""

import struct
import zlib

import numpy as np

from .errors import IoFailure

_COLOR_TYPES = {1: 0, 3: 2, 4: 6}  # channels -> PNG color type


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    )


def write_png(path, array) -> None:
    """Write a uint8 or uint16 image of shape (H, W[, C]) with C in {1, 3, 4}."""
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in _COLOR_TYPES:
        raise ValueError("image must be (H, W) or (H, W, 1|3|4)")
    if arr.dtype == np.uint8:
        depth, raw = 8, arr
    elif arr.dtype == np.uint16:
        depth, raw = 16, arr.astype(">u2")
    else:
        raise ValueError("image dtype must be uint8 or uint16")
    h, w, c = arr.shape
    header = struct.pack(">IIBBBBB", w, h, depth, _COLOR_TYPES[c], 0, 0, 0)
    rows = raw.tobytes()
    stride = w * c * (depth // 8)
    filtered = b"".join(
        b"\x00" + rows[y * stride : (y + 1) * stride] for y in range(h)
    )
    try:
        with open(path, "wb") as fh:
            fh.write(b"\x89PNG\r\n\x1a\n")
            fh.write(_chunk(b"IHDR", header))
            fh.write(_chunk(b"IDAT", zlib.compress(filtered, 6)))
            fh.write(_chunk(b"IEND", b""))
    except OSError as exc:
        raise IoFailure(f"cannot write PNG {path}: {exc}") from exc


def read_png(path) -> np.ndarray:
    """Read PNGs produced by write_png (no interlace, filter type 0 rows)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read PNG {path}: {exc}") from exc
    if data[:8] != b"\x89PNG\r\n\x1a\n":
        raise IoFailure(f"{path} is not a PNG file")
    pos = 8
    idat = b""
    header = None
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        tag = data[pos + 4 : pos + 8]
        payload = data[pos + 8 : pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            header = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if header is None:
        raise IoFailure(f"{path}: missing IHDR")
    w, h, depth, color, _, _, interlace = header
    if interlace:
        raise IoFailure("interlaced PNG not supported")
    channels = {0: 1, 2: 3, 6: 4}[color]
    stride = w * channels * (depth // 8)
    raw = zlib.decompress(idat)
    out = np.empty((h, w, channels), dtype=np.uint16 if depth == 16 else np.uint8)
    for y in range(h):
        row = raw[y * (stride + 1) : (y + 1) * (stride + 1)]
        if row[0] != 0:
            raise IoFailure("only filter type 0 rows are supported")
        dt = ">u2" if depth == 16 else np.uint8
        out[y] = np.frombuffer(row[1:], dtype=dt).reshape(w, channels)
    return out.squeeze()


def write_pfm(path, array) -> None:
    """Single-channel little-endian PFM; rows are written bottom-up per spec."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("PFM writer expects a 2D array")
    h, w = arr.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
            fh.write(arr[::-1].astype("<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write PFM {path}: {exc}") from exc


def read_pfm(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            if fh.readline().strip() != b"Pf":
                raise IoFailure(f"{path} is not a grayscale PFM")
            w, h = (int(t) for t in fh.readline().split())
            scale = float(fh.readline())
            data = np.frombuffer(fh.read(), dtype="<f4" if scale < 0 else ">f4")
    except OSError as exc:
        raise IoFailure(f"cannot read PFM {path}: {exc}") from exc
    return data.reshape(h, w)[::-1].copy()


def heatmap_u8(grid) -> np.ndarray:
    """Scale a nonnegative grid to uint8 for a quick-look PNG."""
    g = np.asarray(grid, dtype=np.float64)
    top = g.max()
    if top <= 0:
        return np.zeros(g.shape, dtype=np.uint8)
    return np.clip(np.round(255.0 * g / top), 0, 255).astype(np.uint8)
