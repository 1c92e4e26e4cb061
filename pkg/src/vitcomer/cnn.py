"""CNN branch: convolutional stem producing the 1/8, 1/16, 1/32 pyramid, and MRFP."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, concat, gelu, reshape, split, transpose2d
from .nn import Conv2d, Linear, Module
from .vit import check_image

STRIDES = (8, 16, 32)


def level_shapes(h: int, w: int) -> tuple:
    return tuple((h // s, w // s) for s in STRIDES)


@dataclass
class TokenSeq:
    """Pyramid levels flattened row-major and concatenated: tokens [T x D]."""

    tokens: Tensor
    level_shapes: tuple

    def __post_init__(self):
        self.level_shapes = tuple(tuple(int(v) for v in s) for s in self.level_shapes)
        if self.tokens.shape[0] != sum(h * w for h, w in self.level_shapes):
            raise ShapeError(f"{self.tokens.shape[0]} tokens do not match level shapes {self.level_shapes}")

    @property
    def level_sizes(self) -> list:
        return [h * w for h, w in self.level_shapes]

    @property
    def level_offsets(self) -> list:
        return [int(v) for v in np.concatenate([[0], np.cumsum(self.level_sizes)[:-1]])]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: Tensor) -> "TokenSeq":
        return TokenSeq(tokens, self.level_shapes)


def flatten_map(x: Tensor) -> Tensor:
    """[D x h x w] -> [hw x D]."""
    d, h, w = x.shape
    return transpose2d(reshape(x, (d, h * w)))


def unflatten_map(t: Tensor, h: int, w: int) -> Tensor:
    """[hw x D] -> [D x h x w]."""
    if t.shape[0] != h * w:
        raise ShapeError(f"{t.shape[0]} tokens cannot form a {h}x{w} map")
    return reshape(transpose2d(t), (t.shape[1], h, w))


def flatten(levels: Sequence[Tensor]) -> TokenSeq:
    dims = {lv.shape[0] for lv in levels}
    if len(dims) != 1:
        raise ShapeError(f"pyramid levels disagree on channel count: {sorted(dims)}")
    shapes = tuple(lv.shape[1:] for lv in levels)
    return TokenSeq(concat([flatten_map(lv) for lv in levels], axis=0), shapes)


def unflatten(ts: TokenSeq) -> list:
    parts = split(ts.tokens, ts.level_sizes, axis=0) if len(ts.level_sizes) > 1 else [ts.tokens]
    return [unflatten_map(p, h, w) for p, (h, w) in zip(parts, ts.level_shapes)]


class ConvStem(Module):
    """Five stride-2 3x3 convs with GELU, then a 1x1 projection to D per level."""

    def __init__(self, dim: int, width: int, rng=None, dtype=np.float64):
        if width % 2:
            raise ValueError(f"stem width {width} must be even")
        half = width // 2
        self.conv1 = Conv2d(3, half, 3, 2, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(half, width, 3, 2, rng=rng, dtype=dtype)
        self.conv3 = Conv2d(width, width, 3, 2, rng=rng, dtype=dtype)
        self.conv4 = Conv2d(width, width, 3, 2, rng=rng, dtype=dtype)
        self.conv5 = Conv2d(width, width, 3, 2, rng=rng, dtype=dtype)
        self.proj = [Conv2d(width, dim, 1, rng=rng, dtype=dtype) for _ in STRIDES]

    def __call__(self, image: Tensor) -> list:
        check_image(image)
        x = gelu(self.conv2(gelu(self.conv1(image))))
        c3 = gelu(self.conv3(x))
        c4 = gelu(self.conv4(c3))
        c5 = gelu(self.conv5(c4))
        return [p(c) for p, c in zip(self.proj, (c3, c4, c5))]

    @staticmethod
    def count(dim: int, width: int) -> int:
        half = width // 2
        n = Conv2d.count(3, half, 3) + Conv2d.count(half, width, 3) + 3 * Conv2d.count(width, width, 3)
        return n + 3 * Conv2d.count(width, dim, 1)


class MRFP(Module):
    """FC down, per-group depthwise convs (one kernel size per group, per level), FC up."""

    def __init__(self, dim: int, hidden: int, kernel_sizes: Sequence[int], rng=None, dtype=np.float64):
        m = len(kernel_sizes)
        if m == 0 or hidden % m:
            raise ShapeError(f"reduced width {hidden} not divisible into {m} groups")
        if any(k % 2 == 0 for k in kernel_sizes):
            raise ValueError(f"kernel sizes must be odd: {list(kernel_sizes)}")
        gc = hidden // m
        # MRFP replaces F rather than adding to it, so its projections use a
        # variance-preserving scale; the 0.02 used for residual branches would
        # shrink the CNN pathway by ~100x per stage.
        self.fc_down = Linear(dim, hidden, rng, dtype, std=dim ** -0.5)
        self.convs = [Conv2d(gc, gc, k, 1, groups=gc, rng=rng, dtype=dtype) for k in kernel_sizes]
        self.fc_up = Linear(hidden, dim, rng, dtype, std=hidden ** -0.5)
        self.kernel_sizes = tuple(kernel_sizes)

    def __call__(self, ts: TokenSeq) -> TokenSeq:
        reduced = ts.with_tokens(self.fc_down(ts.tokens))
        gc = self.convs[0].kernel.shape[0]
        out_levels = []
        for lv in unflatten(reduced):
            groups = split(lv, [gc] * len(self.convs), axis=0) if len(self.convs) > 1 else [lv]
            mixed = [conv(g) for conv, g in zip(self.convs, groups)]
            out_levels.append(mixed[0] if len(mixed) == 1 else concat(mixed, axis=0))
        merged = flatten(out_levels)
        return ts.with_tokens(self.fc_up(merged.tokens))

    @staticmethod
    def count(dim: int, hidden: int, kernel_sizes: Sequence[int]) -> int:
        gc = hidden // len(kernel_sizes)
        convs = sum(Conv2d.count(gc, gc, k, groups=gc) for k in kernel_sizes)
        return Linear.count(dim, hidden) + convs + Linear.count(hidden, dim)
