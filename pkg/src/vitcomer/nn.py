"""Neural primitives shared by the ViT and CNN branches.

Functional ops take tensors and return tensors recorded on the active tape;
:class:`Linear`, :class:`LayerNorm` and :class:`Conv2d` hold parameters.
"""
from __future__ import annotations

import math
from typing import Iterator, Optional, Sequence

import numpy as np

from . import kernels
from .autodiff import (ShapeError, Tensor, concat, gelu, matmul, parameter, record,
                       reshape, scale, slice_axis, transpose2d)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Module:
    """Parameter container; attribute order fixes parameter naming and order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: stored dims {list(arr.shape)} != model dims {p.dims}")
            p.data = arr.astype(p.dtype, copy=True)


# layers

class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng=None, dtype=np.float64, zero: bool = False,
                 std: float = 0.02):
        if zero or rng is None:
            w = np.zeros((d_out, d_in), dtype=dtype)
        else:
            w = trunc_normal(rng, (d_out, d_in), std, dtype)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(d_out, dtype=dtype))

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    @staticmethod
    def count(d_in: int, d_out: int) -> int:
        return d_in * d_out + d_out


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-6):
        self.gamma = parameter(np.ones(dim, dtype=dtype))
        self.beta = parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    @staticmethod
    def count(dim: int) -> int:
        return 2 * dim


class Conv2d(Module):
    """Zero-padded cross-correlation; kernel dims [out, in/groups, k, k]."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, groups: int = 1,
                 rng=None, dtype=np.float64, padding: Optional[int] = None):
        if c_in % groups or c_out % groups:
            raise ShapeError(f"groups={groups} must divide in={c_in} and out={c_out}")
        fan_in = (c_in // groups) * k * k
        if rng is None:
            w = np.zeros((c_out, c_in // groups, k, k), dtype=dtype)
        else:
            w = (rng.standard_normal((c_out, c_in // groups, k, k)) * math.sqrt(2.0 / fan_in)).astype(dtype)
        self.kernel = parameter(w)
        self.bias = parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, self.stride, self.padding, self.groups)

    @staticmethod
    def count(c_in: int, c_out: int, k: int, groups: int = 1) -> int:
        return c_out * (c_in // groups) * k * k + c_out


class FFN(Module):
    """Linear(D -> ceil(rD)) -> GELU -> Linear(ceil(rD) -> D)."""

    def __init__(self, dim: int, ratio: float, rng=None, dtype=np.float64):
        hidden = ffn_hidden(dim, ratio)
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))

    @staticmethod
    def count(dim: int, ratio: float) -> int:
        h = ffn_hidden(dim, ratio)
        return Linear.count(dim, h) + Linear.count(h, dim)


def ffn_hidden(dim: int, ratio: float) -> int:
    return max(1, int(math.ceil(ratio * dim - 1e-9)))


class Attention(Module):
    """Multi-head self-attention with fused qkv projection."""

    def __init__(self, dim: int, heads: int, rng=None, dtype=np.float64):
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)
        self.heads = heads

    def __call__(self, x: Tensor, return_attn: bool = False):
        return mhsa(x, self.qkv, self.proj, self.heads, return_attn)

    @staticmethod
    def count(dim: int) -> int:
        return Linear.count(dim, 3 * dim) + Linear.count(dim, dim)


# functional ops

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x W^T + b for x [tokens x in], W [out x in]."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input dims {x.dims} vs weight {w.dims}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is None:
        return record("linear", (x, w), out, lambda g: (g @ wd, g.T @ xd))
    return record("linear", (x, w, b), out + b.data,
                  lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor], stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    c = x.shape[0]
    o, cg, k, k2 = kernel.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if c % groups or o % groups or c // groups != cg:
        raise ShapeError(f"conv2d: input channels {c}, kernel {kernel.dims}, groups {groups}")
    xd, wd = x.data, kernel.data
    out = kernels.conv2d_forward(xd, wd, stride, padding, groups)

    def vjp(g):
        gx, gw = kernels.conv2d_backward(xd, wd, g, stride, padding, groups)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    if bias is None:
        return record("conv2d", (x, kernel), out, vjp)
    return record("conv2d", (x, kernel, bias), out + bias.data[:, None, None], vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"layer_norm: width {x.shape[-1]} vs gamma {gamma.shape[0]}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def vjp(g):
        gx_hat = g * gd
        n = xd.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, (g * xhat).reshape(-1, n).sum(0), g.reshape(-1, n).sum(0)

    return record("layer_norm", (x, gamma, beta), xhat * gd + beta.data, vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", (x,), y,
                  lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def mhsa(x: Tensor, qkv: Linear, proj: Linear, heads: int, return_attn: bool = False):
    """Scaled dot-product multi-head self-attention over x [tokens x D]."""
    d = x.shape[1]
    if d % heads:
        raise ShapeError(f"dim {d} not divisible by heads {heads}")
    dh = d // heads
    fused = qkv(x)
    outs, maps = [], []
    for h in range(heads):
        q = slice_axis(fused, h * dh, (h + 1) * dh, axis=1)
        k = slice_axis(fused, d + h * dh, d + (h + 1) * dh, axis=1)
        v = slice_axis(fused, 2 * d + h * dh, 2 * d + (h + 1) * dh, axis=1)
        att = softmax(scale(matmul(q, transpose2d(k)), 1.0 / math.sqrt(dh)), axis=1)
        maps.append(att)
        outs.append(matmul(att, v))
    y = proj(outs[0] if heads == 1 else concat(outs, axis=1))
    return (y, maps) if return_attn else y


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out x n_in] linear-interpolation matrix (align_corners=False)."""
    m = np.zeros((n_out, n_in))
    sc = n_in / n_out
    for d in range(n_out):
        src = max((d + 0.5) * sc - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0 if i0 < n_in - 1 else 0.0
        m[d, i0] += 1.0 - lam
        m[d, i1] += lam
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize a [C x H x W] map; source coordinate (dst + 0.5) * scale - 0.5, border-clamped."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("output size must be positive")
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    ry = resize_matrix(h, out_h).astype(x.dtype)
    rx = resize_matrix(w, out_w).astype(x.dtype)
    out = ry @ x.data @ rx.T
    return record("bilinear_resize", (x,), out, lambda g: (ry.T @ g @ rx,))


def ms_deform_core(value: Tensor, level_shapes: Sequence, pix: Tensor, attw: Tensor) -> Tensor:
    """Weighted bilinear gather over a multi-level value sequence.

    value [T x heads x dh] holds every level row-major and concatenated;
    pix [Q x heads x L x K x 2] are (x, y) pixel coordinates in each level;
    attw [Q x heads x L x K]. Samples outside a level read zeros.
    """
    shapes = np.asarray(level_shapes, dtype=np.int64).reshape(-1, 2)
    sizes = shapes[:, 0] * shapes[:, 1]
    if sizes.sum() != value.shape[0]:
        raise ShapeError(f"value length {value.shape[0]} != sum of level sizes {int(sizes.sum())}")
    if pix.shape[:4] != attw.shape or pix.shape[1] != value.shape[1] or pix.shape[2] != len(shapes):
        raise ShapeError(f"deform core: pix {pix.dims}, attw {attw.dims}, value {value.dims}")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    vd, pd, ad = value.data, pix.data, attw.data
    out = kernels.deform_forward(vd, shapes, starts, pd, ad)
    return record("ms_deform_core", (value, pix, attw), out,
                  lambda g: kernels.deform_backward(vd, shapes, starts, pd, ad, g))


def bilinear_sample(x: Tensor, points: Tensor) -> Tensor:
    """Sample a [C x H x W] map at fractional (px, py) pixel coordinates -> [P x C].

    Differentiable in both the map and the points; zero outside the map.
    """
    c, h, w = x.shape
    p = points.shape[0]
    value = reshape(transpose2d(reshape(x, (c, h * w))), (h * w, 1, c))
    pix = reshape(points, (p, 1, 1, 1, 2))
    ones = Tensor(np.ones((p, 1, 1, 1), dtype=x.dtype))
    return reshape(ms_deform_core(value, [(h, w)], pix, ones), (p, c))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy; logits [classes x H x W], integer labels [H x W]."""
    z = logits.data
    if z.shape[1:] != labels.shape:
        raise ShapeError(f"logits {list(z.shape)} vs labels {list(labels.shape)}")
    zs = z - z.max(axis=0, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=0))
    lab = labels.astype(np.int64)
    picked = np.take_along_axis(zs, lab[None], axis=0)[0]
    n = labels.size
    loss = np.asarray((lse - picked).sum() / n, dtype=z.dtype)

    def vjp(g):
        p = np.exp(zs - lse[None])
        np.put_along_axis(p, lab[None], np.take_along_axis(p, lab[None], axis=0) - 1.0, axis=0)
        return (p * (g / n),)

    return record("cross_entropy", (logits,), loss, vjp)
