"""Pixel-level helpers: luminance, bilinear resampling, binary PGM/PPM I/O."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

LUMA = np.array([0.299, 0.587, 0.114])


def luminance(image: np.ndarray) -> np.ndarray:
    """(3, H, W) RGB -> (H, W) luma; batched (B, 3, H, W) -> (B, H, W)."""
    image = np.asarray(image, dtype=np.float64)
    return np.tensordot(LUMA, image, axes=([0], [-3])) if image.ndim == 3 else \
        np.einsum("c,bchw->bhw", LUMA, image)


def bilinear_sample(values: np.ndarray, ys, xs) -> np.ndarray:
    """Sample a 2-D grid at continuous (row, col) index coordinates.

    Integer coordinates return the grid values exactly; coordinates outside
    the grid are clamped to the border.
    """
    v = np.asarray(values, dtype=np.float64)
    h, w = v.shape[-2:]
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    top = v[..., y0, x0] * (1 - wx) + v[..., y0, x1] * wx
    bot = v[..., y1, x0] * (1 - wx) + v[..., y1, x1] * wx
    return top * (1 - wy) + bot * wy


def resize_bilinear(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes with half-pixel-centre bilinear interpolation."""
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[-2:]
    oh, ow = out_hw
    if (H, W) == (oh, ow):
        return image.copy()
    ys = (np.arange(oh) + 0.5) * (H / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (W / ow) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(image, yy, xx)


# --------------------------------------------------------------------------
# Netpbm
# --------------------------------------------------------------------------
def to_bytes(image01: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8 by rounding to the nearest level."""
    return np.clip(np.rint(np.asarray(image01) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary PGM (P5)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(pixels).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_ppm(path, image01: np.ndarray) -> None:
    """Write a (3, H, W) image in [0, 1] as binary PPM (P6)."""
    rgb = to_bytes(np.asarray(image01).transpose(1, 2, 0))
    h, w, _ = rgb.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(rgb).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _header_tokens(buf: bytes, count: int, path) -> tuple[list[int], int]:
    tokens: list[bytes] = []
    pos = 2
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated Netpbm header")
        tokens.append(buf[start:pos])
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{path}: malformed Netpbm header")
    try:
        return [int(t) for t in tokens], pos + 1
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric Netpbm header field") from exc


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file as a (3, H, W) float image in [0, 1] (grey is replicated)."""
    path = Path(path)
    buf = path.read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    (w, h, maxval), off = _header_tokens(buf, 3, path)
    if w < 1 or h < 1 or not (0 < maxval < 65536):
        raise FormatError(f"{path}: invalid dimensions or maxval")
    ch = 1 if magic == b"P5" else 3
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = w * h * ch * dtype.itemsize
    body = buf[off:off + need]
    if len(body) != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=dtype).astype(np.float64) / maxval
    arr = arr.reshape(h, w, ch).transpose(2, 0, 1)
    if ch == 1:
        arr = np.repeat(arr, 3, axis=0)
    return np.ascontiguousarray(arr)
