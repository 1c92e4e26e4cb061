"""Two-branch ViT-CoMer assembly, configuration variants and parameter accounting."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .autodiff import Tensor, add, record
from .cnn import MRFP, ConvStem, TokenSeq, flatten, flatten_map, unflatten, unflatten_map
from .cti import CTI, fuse, inject_to_cnn, inject_to_vit
from .nn import Linear, Module, bilinear_resize, cross_entropy, trunc_normal
from .vit import PlainViT, ViTConfig, check_image

DTYPES = {"f32": np.float32, "f64": np.float64}

# (depth, dim, heads) of the named backbones; all use four stages
VARIANTS = {
    "toy": dict(depth=4, dim=16, heads=2, stages=2, cti_heads=4, img_h=64, img_w=64),
    "T": dict(depth=12, dim=192, heads=3, stages=4, cti_heads=8, img_h=224, img_w=224),
    "S": dict(depth=12, dim=384, heads=6, stages=4, cti_heads=8, img_h=224, img_w=224),
    "B": dict(depth=12, dim=768, heads=12, stages=4, cti_heads=8, img_h=224, img_w=224),
    "L": dict(depth=24, dim=1024, heads=16, stages=4, cti_heads=8, img_h=224, img_w=224),
}

STEM_WIDTH_CAP = 192


@dataclass(frozen=True)
class CoMerConfig:
    variant: str = "toy"
    depth: int = 4
    dim: int = 16
    heads: int = 2
    mlp_ratio: float = 4.0
    img_h: int = 64
    img_w: int = 64
    stages: int = 2
    stem_dim: int = 0  # 0 -> min(dim, 192)
    mrfp_kernels: tuple = (3, 5)
    mrfp_ratio: float = 0.5
    cti_heads: int = 4
    cti_points: int = 4
    cti_ffn_ratio: float = 0.25
    cti_value_ratio: float = 0.5
    mrfp_enabled: bool = True
    cti_to_vit: bool = True
    cti_to_cnn: bool = True
    quarter_level: bool = False
    num_classes: int = 4
    dtype: str = "f64"
    seed: int = 0

    @classmethod
    def from_variant(cls, name: str, **overrides) -> "CoMerConfig":
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        cfg = cls(variant=name, **{**VARIANTS[name], **overrides})
        cfg.validate()
        return cfg

    def with_(self, **changes) -> "CoMerConfig":
        cfg = replace(self, **changes)
        cfg.validate()
        return cfg

    @property
    def vit(self) -> ViTConfig:
        return ViTConfig(self.depth, self.dim, self.heads, self.mlp_ratio, 16, self.img_h, self.img_w)

    @property
    def stem_width(self) -> int:
        return self.stem_dim or min(self.dim, STEM_WIDTH_CAP)

    @property
    def mrfp_hidden(self) -> int:
        return int(round(self.dim * self.mrfp_ratio))

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def validate(self) -> None:
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.stages < 1 or self.depth % self.stages:
            raise ValueError(f"depth {self.depth} is not divisible by stages {self.stages}")
        self.vit.validate()
        if self.mrfp_enabled:
            if not self.mrfp_kernels:
                raise ValueError("mrfp_kernels is empty")
            if self.mrfp_hidden % len(self.mrfp_kernels):
                raise ValueError(f"MRFP width {self.mrfp_hidden} not divisible by "
                                 f"{len(self.mrfp_kernels)} kernel groups")
            if any(k % 2 == 0 or k < 1 for k in self.mrfp_kernels):
                raise ValueError(f"MRFP kernel sizes must be odd: {self.mrfp_kernels}")
        if (self.cti_to_vit or self.cti_to_cnn):
            vd = int(round(self.dim * self.cti_value_ratio))
            if vd % self.cti_heads:
                raise ValueError(f"CTI value width {vd} not divisible by {self.cti_heads} heads")
        if self.stem_width % 2:
            raise ValueError(f"stem width {self.stem_width} must be even")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(k) for k in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


@dataclass
class Outputs:
    levels: list
    vit: Tensor
    cnn: TokenSeq
    quarter: Optional[Tensor] = None
    trace: list = field(default_factory=list)


def conv_transpose_s2(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """2x2 stride-2 transposed convolution; kernel [in x out x 2 x 2]."""
    xd, wd = x.data, kernel.data
    c, h, w = xd.shape
    o = wd.shape[1]
    out = np.einsum("chw,coij->ohiwj", xd, wd).reshape(o, 2 * h, 2 * w) + bias.data[:, None, None]

    def vjp(g):
        g5 = g.reshape(o, h, 2, w, 2)
        return (np.einsum("ohiwj,coij->chw", g5, wd), np.einsum("ohiwj,chw->coij", g5, xd),
                g.sum(axis=(1, 2)))

    return record("conv_transpose", (x, kernel, bias), out, vjp)


class QuarterLevel(Module):
    def __init__(self, dim: int, rng=None, dtype=np.float64):
        w = trunc_normal(rng, (dim, dim, 2, 2), 0.02, dtype) if rng is not None else \
            np.zeros((dim, dim, 2, 2), dtype=dtype)
        self.kernel = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose_s2(x, self.kernel, self.bias)

    @staticmethod
    def count(dim: int) -> int:
        return dim * dim * 4 + dim


class CoMer(Module):
    """ViT-CoMer backbone plus a per-level 1x1 segmentation head."""

    def __init__(self, cfg: CoMerConfig, seed: Optional[int] = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        dt = cfg.np_dtype
        d, n = cfg.dim, cfg.stages
        self.vit = PlainViT(cfg.vit, rng, dt)
        self.stem = ConvStem(d, cfg.stem_width, rng, dt)
        self.mrfp = [MRFP(d, cfg.mrfp_hidden, cfg.mrfp_kernels, rng, dt)
                     for _ in range(n)] if cfg.mrfp_enabled else []
        cti = dict(heads=cfg.cti_heads, points=cfg.cti_points, ffn_ratio=cfg.cti_ffn_ratio,
                   value_ratio=cfg.cti_value_ratio, rng=rng, dtype=dt)
        self.cti_to_vit = [CTI(d, gated=True, **cti) for _ in range(n)] if cfg.cti_to_vit else []
        self.cti_to_cnn = [CTI(d, gated=False, **cti) for _ in range(n)] if cfg.cti_to_cnn else []
        self.quarter = QuarterLevel(d, rng, dt) if cfg.quarter_level else None
        self.head = [Linear(d, cfg.num_classes, dtype=dt, zero=True)
                     for _ in range(3)] if cfg.num_classes else []

    def alphas(self) -> list:
        return [c.alpha for c in self.cti_to_vit]

    def forward(self, image: Tensor, trace: bool = False) -> Outputs:
        cfg = self.cfg
        check_image(image)
        n = cfg.stages
        steps = [] if trace else None
        x = self.vit.embed(image)
        if trace:
            steps.append(x.data)
        f = flatten(self.stem(image))
        for i in range(n):
            if cfg.mrfp_enabled:
                f = self.mrfp[i](f)
            if cfg.cti_to_vit:
                cti = self.cti_to_vit[i]
                x = inject_to_vit(x, cti.core(fuse(x, f)), cti.alpha)
            x = self.vit.run_stage(x, i + 1, n, steps)
            if cfg.cti_to_cnn:
                fused = fuse(x, f)
                f = inject_to_cnn(fused, self.cti_to_cnn[i].core(fused))
        gh, gw = f.level_shapes[1]
        vit_map = unflatten_map(x, gh, gw)
        levels = [add(c, bilinear_resize(vit_map, c.shape[1], c.shape[2])) for c in unflatten(f)]
        quarter = self.quarter(levels[0]) if self.quarter is not None else None
        return Outputs(levels, x, f, quarter, steps or [])

    __call__ = forward

    def logits(self, out: Outputs) -> Tensor:
        """Per-level 1x1 heads, resized onto the 1/8 grid and summed."""
        h8, w8 = out.levels[0].shape[1:]
        total = None
        for head, lv in zip(self.head, out.levels):
            z = unflatten_map(head(flatten_map(lv)), lv.shape[1], lv.shape[2])
            z = bilinear_resize(z, h8, w8)
            total = z if total is None else add(total, z)
        return total

    def loss(self, image: Tensor, labels: np.ndarray) -> Tensor:
        if not self.head:
            raise ValueError("model was built without a segmentation head (num_classes = 0)")
        z = self.logits(self.forward(image))
        return cross_entropy(bilinear_resize(z, *labels.shape), labels)

    def plain_vit(self) -> PlainViT:
        """Standalone plain ViT holding copies of this model's ViT weights."""
        vit = PlainViT(self.cfg.vit, None, self.cfg.np_dtype)
        vit.load_state_dict({k: v.copy() for k, v in self.vit.state_dict().items()})
        return vit


def param_count(cfg: CoMerConfig) -> dict:
    """Analytic per-module parameter counts (nothing is allocated)."""
    cfg.validate()
    d, n = cfg.dim, cfg.stages
    cti_args = (d, cfg.cti_heads, cfg.cti_points, cfg.cti_ffn_ratio, cfg.cti_value_ratio)
    counts = {
        "vit": PlainViT.count(cfg.vit),
        "stem": ConvStem.count(d, cfg.stem_width),
        "mrfp": n * MRFP.count(d, cfg.mrfp_hidden, cfg.mrfp_kernels) if cfg.mrfp_enabled else 0,
        "cti_to_vit": n * CTI.count(*cti_args, gated=True) if cfg.cti_to_vit else 0,
        "cti_to_cnn": n * CTI.count(*cti_args, gated=False) if cfg.cti_to_cnn else 0,
        "quarter": QuarterLevel.count(d) if cfg.quarter_level else 0,
        "head": 3 * Linear.count(d, cfg.num_classes) if cfg.num_classes else 0,
    }
    counts["total"] = sum(counts.values())
    counts["backbone"] = counts["total"] - counts["head"]
    counts["plain_vit"] = counts["vit"]
    counts["overhead"] = counts["backbone"] - counts["vit"]
    return counts


def allocated_count(model: CoMer) -> dict:
    groups = {"vit": model.vit, "stem": model.stem}
    out = {k: m.num_parameters() for k, m in groups.items()}
    out["mrfp"] = sum(m.num_parameters() for m in model.mrfp)
    out["cti_to_vit"] = sum(m.num_parameters() for m in model.cti_to_vit)
    out["cti_to_cnn"] = sum(m.num_parameters() for m in model.cti_to_cnn)
    out["quarter"] = model.quarter.num_parameters() if model.quarter is not None else 0
    out["head"] = sum(m.num_parameters() for m in model.head)
    out["total"] = model.num_parameters()
    return out
