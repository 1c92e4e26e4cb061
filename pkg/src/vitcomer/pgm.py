"""Binary PGM/PPM (P5/P6) reading and writing plus built-in input patterns."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .toydata import render

MID_GRAY = 128
PATTERNS = ("shapes", "constant", "gradient", "checker")


class ImageError(ValueError):
    pass


def normalize(m: np.ndarray) -> np.ndarray:
    """Min-max scale a 2-d map to 0..255; a map with zero range becomes uniform 128."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if not hi > lo:
        return np.full(m.shape, MID_GRAY, dtype=np.uint8)
    return np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ImageError(f"PGM needs a 2-d uint8 array, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def _tokens(buf: bytes, count: int) -> tuple:
    """Read `count` whitespace-separated header tokens (skipping # comments)."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageError("truncated PNM header")
        out.append(buf[start:pos])
    return out, pos + 1  # exactly one whitespace byte precedes the raster


def read_pnm(path) -> np.ndarray:
    """Read P5 or P6 with maxval <= 255; returns [h x w] or [h x w x 3] uint8."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ImageError(f"cannot read image {path}: {exc}") from None
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise ImageError(f"{path}: unsupported format {magic!r} (need P5 or P6)")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageError(f"{path}: malformed header") from None
    if not 0 < maxval <= 255:
        raise ImageError(f"{path}: maxval {maxval} unsupported (8-bit only)")
    ch = 3 if magic == b"P6" else 1
    raster = buf[pos:pos + w * h * ch]
    if len(raster) != w * h * ch:
        raise ImageError(f"{path}: raster truncated ({len(raster)} of {w * h * ch} bytes)")
    img = np.frombuffer(raster, dtype=np.uint8).reshape((h, w, ch) if ch == 3 else (h, w))
    return img if maxval == 255 else np.rint(img * (255.0 / maxval)).astype(np.uint8)


def image_to_input(img: np.ndarray, dtype=np.float64) -> np.ndarray:
    """uint8 [h x w] or [h x w x 3] -> [3 x h x w] in the units of the synthetic set."""
    x = img.astype(np.float64) / 255.0
    x = np.repeat(x[None], 3, axis=0) if x.ndim == 2 else x.transpose(2, 0, 1)
    return ((x - 0.5) / 0.25).astype(dtype)


def pattern(name: str, h: int, w: int, seed: int = 0, dtype=np.float64) -> np.ndarray:
    """Procedural [3 x h x w] input."""
    if name == "shapes":
        return render(np.random.default_rng(seed), h, w)[0].astype(dtype)
    if name == "constant":
        return np.zeros((3, h, w), dtype=dtype)
    if name == "gradient":
        ramp = np.linspace(-2.0, 2.0, w)
        return np.broadcast_to(ramp, (3, h, w)).astype(dtype)
    if name == "checker":
        yy, xx = np.mgrid[0:h, 0:w]
        board = np.where(((yy // 8) + (xx // 8)) % 2 == 0, 1.0, -1.0)
        return np.broadcast_to(board, (3, h, w)).astype(dtype)
    raise ImageError(f"unknown pattern {name!r}; choose from {', '.join(PATTERNS)}")
