"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"VCMR"  u16 version=1
    u32 config length, UTF-8 config text (key = value lines)
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 dtype (0=f32, 1=f64),
                u8 rank, rank x u32 dims, little-endian payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import model_config_from_text
from .model import CoMer

MAGIC = b"VCMR"
VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def to_bytes(model: CoMer) -> bytes:
    cfg_text = model.cfg.to_text().encode("utf-8")
    params = list(model.named_parameters())
    parts = [MAGIC, struct.pack("<HI", VERSION, len(cfg_text)), cfg_text,
             struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(p.data)
        code = DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        parts.append(struct.pack(f"<H{len(raw)}sBB", len(raw), raw, code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(CODE_DTYPES[code], copy=False).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} "
                                  f"(need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensors(buf: bytes) -> tuple:
    """Parse a checkpoint into (config text, [(name, array), ...]) without building a model."""
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (supported: {VERSION})")
    (n_cfg,) = r.unpack("<I", "config length")
    try:
        cfg_text = r.take(n_cfg, "config text").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"config text is not UTF-8: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = []
    for i in range(count):
        (n_name,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(n_name, f"tensor {i} name").decode("utf-8")
        code, rank = r.unpack("<BB", f"{name} header")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        dt = CODE_DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(size * dt.itemsize, f"{name} payload")
        tensors.append((name, np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    return cfg_text, tensors


def from_bytes(buf: bytes) -> CoMer:
    cfg_text, tensors = read_tensors(buf)
    try:
        cfg = model_config_from_text(cfg_text)
    except ValueError as exc:
        raise CheckpointError(f"invalid config block: {exc}") from None
    model = CoMer(cfg)
    expected = dict(model.named_parameters())
    names = [n for n, _ in tensors]
    if names != list(expected):
        missing = sorted(set(expected) - set(names))
        extra = sorted(set(names) - set(expected))
        raise CheckpointError(f"tensor names do not match the config (missing {missing[:5]}, "
                              f"unexpected {extra[:5]})")
    for name, arr in tensors:
        p = expected[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: shape {list(arr.shape)} does not match config "
                                  f"shape {list(p.shape)}")
        if arr.dtype != p.dtype:
            raise CheckpointError(f"{name}: dtype {arr.dtype} does not match config dtype {p.dtype}")
        p.data = arr.copy()
    return model


def save(model: CoMer, path) -> int:
    data = to_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


def load(path) -> CoMer:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(buf)
