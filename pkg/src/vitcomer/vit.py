"""Plain ViT branch: patch embedding and pre-norm encoder blocks split into stages."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, add, permute, reshape, transpose2d
from .nn import FFN, Attention, LayerNorm, Linear, Module, bilinear_resize, trunc_normal

PATCH = 16


@dataclass(frozen=True)
class ViTConfig:
    depth: int = 4
    dim: int = 16
    heads: int = 2
    mlp_ratio: float = 4.0
    patch: int = PATCH
    img_h: int = 64
    img_w: int = 64

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.img_h % 32 or self.img_w % 32:
            raise ValueError(f"image size {self.img_h}x{self.img_w} must be divisible by 32")

    @property
    def grid(self) -> tuple:
        return self.img_h // self.patch, self.img_w // self.patch


def check_image(image: Tensor, multiple: int = 32) -> tuple:
    if image.data.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a 3 x H x W image, got dims {image.dims}")
    _, h, w = image.shape
    if h % multiple or w % multiple:
        raise ShapeError(f"image size {h}x{w} is not divisible by {multiple}")
    return h, w


class PatchEmbed(Module):
    def __init__(self, cfg: ViTConfig, rng=None, dtype=np.float64):
        p = cfg.patch
        self.proj = Linear(3 * p * p, cfg.dim, rng, dtype)
        gh, gw = cfg.grid
        pos = trunc_normal(rng, (gh * gw, cfg.dim), 0.02, dtype) if rng is not None else \
            np.zeros((gh * gw, cfg.dim), dtype=dtype)
        self.pos_embed = Tensor(pos, requires_grad=True)
        self.grid = (gh, gw)
        self.patch = p

    def __call__(self, image: Tensor) -> Tensor:
        h, w = check_image(image)
        p = self.patch
        gh, gw = h // p, w // p
        # [3, gh, p, gw, p] -> [gh, gw, 3, p, p]: channel-major patch vectors
        patches = reshape(permute(reshape(image, (3, gh, p, gw, p)), (1, 3, 0, 2, 4)),
                          (gh * gw, 3 * p * p))
        tokens = self.proj(patches)
        return add(tokens, self.position(gh, gw))

    def position(self, gh: int, gw: int) -> Tensor:
        sh, sw = self.grid
        if (gh, gw) == (sh, sw):
            return self.pos_embed
        d = self.pos_embed.shape[1]
        grid = reshape(transpose2d(self.pos_embed), (d, sh, sw))
        return transpose2d(reshape(bilinear_resize(grid, gh, gw), (d, gh * gw)))

    @staticmethod
    def count(cfg: ViTConfig) -> int:
        gh, gw = cfg.grid
        return Linear.count(3 * cfg.patch ** 2, cfg.dim) + gh * gw * cfg.dim


class Block(Module):
    """X <- X + MHSA(LN(X)); X <- X + FFN(LN(X))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng=None, dtype=np.float64):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = FFN(dim, mlp_ratio, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = add(x, self.attn(self.norm1(x)))
        return add(x, self.mlp(self.norm2(x)))

    @staticmethod
    def count(dim: int, mlp_ratio: float) -> int:
        return 2 * LayerNorm.count(dim) + Attention.count(dim) + FFN.count(dim, mlp_ratio)


def stage_bounds(depth: int, stages: int) -> list:
    """Block boundaries of the `stages` equal partitions of `depth` blocks."""
    if stages < 1 or depth % stages:
        raise ValueError(f"depth {depth} is not divisible into {stages} stages")
    step = depth // stages
    return [i * step for i in range(stages + 1)]


class PlainViT(Module):
    """Standalone plain ViT; CoMer embeds the same layout as its ViT branch."""

    def __init__(self, cfg: ViTConfig, rng=None, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg, rng, dtype)
        self.blocks = [Block(cfg.dim, cfg.heads, cfg.mlp_ratio, rng, dtype) for _ in range(cfg.depth)]

    def embed(self, image: Tensor) -> Tensor:
        return self.patch_embed(image)

    def run_stage(self, x: Tensor, stage: int, stages: int, trace=None) -> Tensor:
        """Apply blocks of the 1-based `stage` out of `stages`."""
        if not 1 <= stage <= stages:
            raise ValueError(f"stage {stage} outside 1..{stages}")
        b = stage_bounds(len(self.blocks), stages)
        for blk in self.blocks[b[stage - 1]:b[stage]]:
            x = blk(x)
            if trace is not None:
                trace.append(x.data)
        return x

    def __call__(self, image: Tensor, trace=None) -> Tensor:
        x = self.embed(image)
        if trace is not None:
            trace.append(x.data)
        return self.run_stage(x, 1, 1, trace)

    @staticmethod
    def count(cfg: ViTConfig) -> int:
        return PatchEmbed.count(cfg) + cfg.depth * Block.count(cfg.dim, cfg.mlp_ratio)
