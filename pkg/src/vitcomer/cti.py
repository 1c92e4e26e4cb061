"""Bidirectional CNN-Transformer fusion: multi-scale deformable attention, fusion and injection."""
from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, add, concat, mul, reshape, split
from .cnn import TokenSeq, flatten_map, unflatten
from .nn import FFN, LayerNorm, Linear, Module, bilinear_resize, ms_deform_core, softmax


def reference_pixels(query_shapes, value_shapes, heads: int, points: int) -> np.ndarray:
    """Pixel coordinates of each query's reference point in every value level.

    A query at (i, j) of an h x w level has normalized point ((j+0.5)/w, (i+0.5)/h);
    in a level of size h' x w' that maps to (nx*w' - 0.5, ny*h' - 0.5).
    Returns [Q x heads x L x points x 2].
    """
    norm = []
    for h, w in query_shapes:
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        norm.append(np.stack([(jj.ravel() + 0.5) / w, (ii.ravel() + 0.5) / h], axis=1))
    norm = np.concatenate(norm, axis=0)
    sizes = np.array([[w, h] for h, w in value_shapes], dtype=np.float64)
    pix = norm[:, None, :] * sizes[None, :, :] - 0.5
    return np.ascontiguousarray(np.broadcast_to(
        pix[:, None, :, None, :], (norm.shape[0], heads, len(value_shapes), points, 2)))


class DeformAttn(Module):
    """Multi-scale deformable attention over pyramid token sequences.

    Offsets are predicted in pixel units of each level and added to the
    query's reference point; the offset and weight projections start at zero,
    so initial samples sit on the reference points with uniform weights.
    """

    def __init__(self, dim: int, heads: int, points: int, levels: int = 3,
                 value_ratio: float = 1.0, rng=None, dtype=np.float64):
        value_dim = int(round(dim * value_ratio))
        if value_dim % heads:
            raise ShapeError(f"value width {value_dim} not divisible by {heads} heads")
        self.query_proj = Linear(dim, dim, rng, dtype)
        self.sampling_offsets = Linear(dim, heads * levels * points * 2, dtype=dtype, zero=True)
        self.attention_weights = Linear(dim, heads * levels * points, dtype=dtype, zero=True)
        self.value_proj = Linear(dim, value_dim, rng, dtype)
        self.output_proj = Linear(value_dim, dim, rng, dtype)
        self.heads, self.points, self.levels = heads, points, levels
        self.last_pix = None

    def __call__(self, query: TokenSeq, value: TokenSeq, return_weights: bool = False):
        if len(value.level_shapes) != self.levels or len(query.level_shapes) != self.levels:
            raise ShapeError(f"expected {self.levels} levels")
        if query.level_shapes != value.level_shapes:
            raise ShapeError(f"query levels {query.level_shapes} != value levels {value.level_shapes}")
        nq = query.tokens.shape[0]
        h, lv, k = self.heads, self.levels, self.points
        q = self.query_proj(query.tokens)
        offsets = reshape(self.sampling_offsets(q), (nq, h, lv, k, 2))
        ref = reference_pixels(query.level_shapes, value.level_shapes, h, k).astype(offsets.dtype)
        pix = add(offsets, Tensor(ref))
        weights = softmax(reshape(self.attention_weights(q), (nq, h, lv * k)), axis=2)
        weights = reshape(weights, (nq, h, lv, k))
        v = self.value_proj(value.tokens)
        v = reshape(v, (v.shape[0], h, v.shape[1] // h))
        self.last_pix = pix.data
        out = ms_deform_core(v, value.level_shapes, pix, weights)
        out = self.output_proj(reshape(out, (nq, out.shape[1] * out.shape[2])))
        return (out, weights, pix) if return_weights else out

    @staticmethod
    def count(dim: int, heads: int, points: int, levels: int = 3, value_ratio: float = 1.0) -> int:
        vd = int(round(dim * value_ratio))
        return (Linear.count(dim, dim) + Linear.count(dim, heads * levels * points * 2)
                + Linear.count(dim, heads * levels * points) + Linear.count(dim, vd)
                + Linear.count(vd, dim))


class CTI(Module):
    """t = F' + Attn(norm(F')); O = t + FFN(norm2(t)); optional zero-initialized gate."""

    def __init__(self, dim: int, heads: int, points: int, ffn_ratio: float, value_ratio: float,
                 gated: bool, rng=None, dtype=np.float64):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = DeformAttn(dim, heads, points, 3, value_ratio, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FFN(dim, ffn_ratio, rng, dtype)
        if gated:
            self.alpha = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)

    def core(self, fused: TokenSeq) -> TokenSeq:
        n = fused.with_tokens(self.norm1(fused.tokens))
        t = add(fused.tokens, self.attn(n, n))
        return fused.with_tokens(add(t, self.ffn(self.norm2(t))))

    @staticmethod
    def count(dim: int, heads: int, points: int, ffn_ratio: float, value_ratio: float,
              gated: bool) -> int:
        return (2 * LayerNorm.count(dim) + DeformAttn.count(dim, heads, points, 3, value_ratio)
                + FFN.count(dim, ffn_ratio) + int(gated))


def fuse(x: Tensor, f: TokenSeq) -> TokenSeq:
    """Add ViT tokens to the 1/16 level: F' = {F3, F4 + X, F5}."""
    if len(f.level_sizes) != 3:
        raise ShapeError("fuse expects a three-level sequence")
    n16 = f.level_sizes[1]
    if x.shape != (n16, f.dim):
        raise ShapeError(f"ViT tokens {x.dims} do not match 1/16 level [{n16}, {f.dim}]")
    f3, f4, f5 = split(f.tokens, f.level_sizes, axis=0)
    return f.with_tokens(concat([f3, add(f4, x), f5], axis=0))


def align_to_vit(o: TokenSeq) -> Tensor:
    """Resize O3 and O5 onto the 1/16 grid and sum with O4 -> [n16 x D]."""
    o3, o4, o5 = unflatten(o)
    h, w = o.level_shapes[1]
    aligned = add(add(bilinear_resize(o3, h, w), o4), bilinear_resize(o5, h, w))
    return flatten_map(aligned)


def inject_to_vit(x: Tensor, o: TokenSeq, alpha: Tensor) -> Tensor:
    """X_hat = alpha * align(O) + X."""
    return add(mul(align_to_vit(o), alpha), x)


def inject_to_cnn(fused: TokenSeq, o: TokenSeq) -> TokenSeq:
    """F_hat = O + F' (ungated)."""
    if o.tokens.shape != fused.tokens.shape:
        raise ShapeError(f"O {o.tokens.dims} vs F' {fused.tokens.dims}")
    return fused.with_tokens(add(o.tokens, fused.tokens))
