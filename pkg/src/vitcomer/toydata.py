"""Procedural 4-class segmentation set: rectangles, discs and crosses on a noisy background.

Shapes are placed on the stride-8 cell grid at sizes of one to five cells.
The pixel labels are the argmax of the bilinearly upsampled one-hot cell
map, the same rule the segmentation head uses to bring 1/8 logits to full
resolution, so a perfect fit is representable. Plain nearest-cell blocks
are not: bilinear blending rounds their convex corners and leaves a loss
floor near 0.05.
"""
from __future__ import annotations

import numpy as np

from .nn import resize_matrix

CELL = 8
CLASS_COLORS = np.array([
    [0.0, 0.0, 0.0],
    [0.9, 0.25, 0.2],
    [0.2, 0.85, 0.3],
    [0.25, 0.35, 0.95],
])
NUM_CLASSES = 4


def _shape_mask(kind: int, size: int) -> np.ndarray:
    if kind == 1:
        return np.ones((size, max(1, size - 1 + (size % 2))), dtype=bool)
    if kind == 2:
        r = size / 2.0
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r + 1e-9
    m = np.zeros((size, size), dtype=bool)
    mid = size // 2
    m[mid, :] = True
    m[:, mid] = True
    return m


def render(rng: np.random.Generator, h: int, w: int) -> tuple:
    """One image [3 x h x w] in roughly zero-mean units and its label map [h x w]."""
    gh, gw = h // CELL, w // CELL
    cells = np.zeros((gh, gw), dtype=np.int64)
    for _ in range(rng.integers(2, 5)):
        kind = int(rng.integers(1, NUM_CLASSES))
        size = int(rng.integers(1, 5)) if kind != 3 else int(rng.choice([3, 5]))
        mask = _shape_mask(kind, size)
        mh, mw = mask.shape
        if mh > gh or mw > gw:
            continue
        y0 = int(rng.integers(0, gh - mh + 1))
        x0 = int(rng.integers(0, gw - mw + 1))
        cells[y0:y0 + mh, x0:x0 + mw][mask] = kind
    up = resize_matrix(gh, h), resize_matrix(gw, w)
    onehot = np.eye(NUM_CLASSES)[cells].transpose(2, 0, 1)
    labels = np.argmax(np.einsum("ij,cjk,lk->cil", up[0], onehot, up[1]), axis=0)
    background = rng.uniform(0.1, 0.4)
    colors = CLASS_COLORS[labels].transpose(2, 0, 1).copy()
    colors[:, labels == 0] = background
    jitter = rng.uniform(-0.08, 0.08, size=(3, 1, 1))
    img = colors + jitter + rng.normal(0.0, 0.04, size=colors.shape)
    return (img - 0.5) / 0.25, labels


def make_dataset(seed: int, count: int, h: int = 64, w: int = 64, dtype=np.float64) -> tuple:
    """Images [count x 3 x h x w] and labels [count x h x w]; fixed by (seed, count, h, w)."""
    if h % CELL or w % CELL:
        raise ValueError(f"size {h}x{w} must be a multiple of {CELL}")
    rng = np.random.default_rng([seed, count, h, w])
    pairs = [render(rng, h, w) for _ in range(count)]
    images = np.stack([p[0] for p in pairs]).astype(dtype)
    labels = np.stack([p[1] for p in pairs])
    return images, labels
