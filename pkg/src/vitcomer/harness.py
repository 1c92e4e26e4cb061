"""Verification and training workflows behind the command line; each returns a Report."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint, oracles
from .autodiff import Tensor, no_tape
from .cnn import MRFP, STRIDES, TokenSeq, level_shapes, unflatten, unflatten_map
from .config import RunConfig
from .cti import DeformAttn, reference_pixels
from .gradcheck import avoid_sampling_kinks, check_model, group_report, perturb
from .model import CoMer, CoMerConfig, allocated_count, param_count
from .nn import Attention, bilinear_resize, conv2d, mhsa
from .pgm import normalize, write_pgm
from .toydata import make_dataset, render
from .train import DivergenceError, train

# Published overhead targets (total minus plain ViT), in parameters
OVERHEAD_TARGETS = {"T": 3e6, "S": 6e6, "B": 15e6}
OVERHEAD_REL_TOL = 0.25


@dataclass
class Check:
    name: str
    status: str  # PASS, FAIL or INFO
    value: str
    tolerance: str

    def line(self) -> str:
        return f"{self.name}: {self.status}: {self.value}: {self.tolerance}"


@dataclass
class Report:
    checks: list = field(default_factory=list)

    def check(self, name: str, passed: bool, value, tolerance) -> bool:
        self.checks.append(Check(name, "PASS" if passed else "FAIL", str(value), str(tolerance)))
        return passed

    def info(self, name: str, value, note="-") -> None:
        self.checks.append(Check(name, "INFO", str(value), str(note)))

    @property
    def ok(self) -> bool:
        return all(c.status != "FAIL" for c in self.checks)

    @property
    def exit_code(self) -> int:
        return 0 if self.ok else 1

    def text(self) -> str:
        return "".join(c.line() + "\n" for c in self.checks)

    def extend(self, other: "Report", prefix: str = "") -> None:
        for c in other.checks:
            self.checks.append(Check(prefix + c.name, c.status, c.value, c.tolerance))


def _fmt(x: float) -> str:
    return f"{x:.3e}"


def random_image(cfg: CoMerConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    return rng.standard_normal((3, cfg.img_h, cfg.img_w)).astype(cfg.np_dtype)


# shapes

def cmd_shapes(cfg: CoMerConfig, seed: int = 0) -> Report:
    rep = Report()
    model = CoMer(cfg)
    with no_tape():
        out = model.forward(Tensor(random_image(cfg, seed)))
    expect = level_shapes(cfg.img_h, cfg.img_w)
    d = cfg.dim
    for s, lv, (h, w) in zip(STRIDES, out.levels, expect):
        got = "x".join(map(str, lv.shape))
        rep.check(f"level_1/{s}", lv.shape == (d, h, w), got, f"{d}x{h}x{w}")
    for s, size, (h, w) in zip(STRIDES, out.cnn.level_sizes, expect):
        rep.check(f"tokens_1/{s}", size == h * w, size, h * w)
    total = sum(h * w for h, w in expect)
    rep.check("tokens_total", out.cnn.tokens.shape == (total, d),
              "x".join(map(str, out.cnn.tokens.shape)), f"{total}x{d}")
    gh, gw = expect[1]
    rep.check("vit_tokens", out.vit.shape == (gh * gw, d), "x".join(map(str, out.vit.shape)),
              f"{gh * gw}x{d}")
    return rep


# gradcheck

def gradcheck_model(cfg: CoMerConfig, eps: float = 1e-4, tol: float = 1e-4, samples: int = 8,
                    seed: int = 0) -> Report:
    """Central differences at a perturbed, sampling-kink-free point (float64 forced)."""
    cfg = cfg.with_(dtype="f64")
    model = CoMer(cfg)
    perturb(model, seed)
    img, labels = render(np.random.default_rng([seed, 11]), cfg.img_h, cfg.img_w)
    image = Tensor(img)
    margin = avoid_sampling_kinks(model, lambda m: m.forward(image))
    per = check_model(model, lambda m: m.loss(image, labels), eps, samples, seed)
    rep = Report()
    rep.info("sampling_margin_px", _fmt(margin), "distance to nearest grid line")
    for name, err in sorted(group_report(per).items()):
        rep.check(f"grad[{name}]", err < tol, _fmt(err), _fmt(tol))
    for i, a in enumerate(model.alphas()):
        g = float(np.abs(a.grad).max()) if a.grad is not None else 0.0
        rep.check(f"alpha_grad[{i}]", g > 0.0, _fmt(g), "> 0")
    return rep


# equivalence at initialization

def cmd_equiv_init(cfg: CoMerConfig, seed: int = 0, alpha: Optional[float] = None) -> Report:
    """Compare every ViT-branch layer of CoMer with a standalone ViT holding copied weights."""
    cfg = cfg.with_(dtype="f64")
    model = CoMer(cfg)
    if alpha is not None:
        for a in model.alphas():
            a.data[...] = alpha
    plain = model.plain_vit()
    image = Tensor(random_image(cfg, seed))
    with no_tape():
        ours = model.forward(image, trace=True).trace
        ref = []
        plain(image, ref)
    rep = Report()
    rep.check("layer_count", len(ours) == len(ref), len(ours), len(ref))
    first_bad = None
    for i, (a, b) in enumerate(zip(ours, ref)):
        delta = float(np.abs(a - b).max())
        if delta != 0.0 and first_bad is None:
            first_bad = i
        rep.check(f"layer_{i}", delta == 0.0, f"max|d|={delta:.3e}", "0")
    if first_bad is not None:
        rep.info("first_mismatch_layer", first_bad)
    return rep


# loop oracles

ORACLE_SHAPES = ((8, 8), (4, 4), (2, 2))  # 64 x 64 input


def _random_seq(rng, d: int) -> TokenSeq:
    t = sum(h * w for h, w in ORACLE_SHAPES)
    return TokenSeq(Tensor(rng.standard_normal((t, d))), ORACLE_SHAPES)


def oracle_deform(seed: int) -> float:
    rng = np.random.default_rng([seed, 1])
    attn = DeformAttn(4, heads=1, points=2, levels=3, value_ratio=1.0, rng=rng)
    # move samples off the reference points, including outside the maps
    attn.sampling_offsets.weight.data = rng.normal(0, 0.5, attn.sampling_offsets.weight.shape)
    attn.sampling_offsets.bias.data = rng.normal(0, 1.5, attn.sampling_offsets.bias.shape)
    attn.attention_weights.weight.data = rng.normal(0, 0.5, attn.attention_weights.weight.shape)
    attn.attention_weights.bias.data = rng.normal(0, 0.5, attn.attention_weights.bias.shape)
    for lin in (attn.query_proj, attn.value_proj, attn.output_proj):
        lin.bias.data = rng.normal(0, 0.1, lin.bias.shape)
    q, v = _random_seq(rng, 4), _random_seq(rng, 4)
    with no_tape():
        got = attn(q, v).data
    want = oracles.deform_attn(q.tokens.data, v.tokens.data, ORACLE_SHAPES, attn.state_dict(), 1, 2)
    return float(np.abs(got - want).max())


def oracle_conv(seed: int) -> float:
    rng = np.random.default_rng([seed, 2])
    worst = 0.0
    for c_in, c_out, k, stride, groups in ((3, 4, 3, 1, 1), (4, 6, 3, 2, 2), (6, 6, 5, 1, 6),
                                           (4, 4, 1, 1, 1), (6, 6, 3, 2, 6)):
        x = rng.standard_normal((c_in, 9, 7))
        w = rng.standard_normal((c_out, c_in // groups, k, k))
        b = rng.standard_normal(c_out)
        with no_tape():
            got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, k // 2, groups).data
        want = oracles.conv2d(x, w, b, stride, k // 2, groups)
        worst = max(worst, float(np.abs(got - want).max()))
    return worst


def oracle_mhsa(seed: int) -> float:
    rng = np.random.default_rng([seed, 3])
    att = Attention(8, 2, rng)
    for lin in (att.qkv, att.proj):
        lin.weight.data = rng.normal(0, 0.4, lin.weight.shape)
        lin.bias.data = rng.normal(0, 0.1, lin.bias.shape)
    x = rng.standard_normal((6, 8))
    with no_tape():
        got = mhsa(Tensor(x), att.qkv, att.proj, 2).data
    want = oracles.mhsa(x, att.qkv.weight.data, att.qkv.bias.data, att.proj.weight.data,
                        att.proj.bias.data, 2)
    return float(np.abs(got - want).max())


def oracle_mrfp(seed: int, kernels: tuple = (3, 5)) -> float:
    rng = np.random.default_rng([seed, 4])
    m = MRFP(4, 2 * len(kernels), tuple(kernels), rng)
    for _, p in m.named_parameters():
        p.data = rng.normal(0, 0.5, p.shape)
    t = _random_seq(rng, 4)
    with no_tape():
        got = m(t).tokens.data
    want = oracles.mrfp(t.tokens.data, ORACLE_SHAPES, m.state_dict(), tuple(kernels))
    return float(np.abs(got - want).max())


def _bilinear_zero_pad(plane: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """plane [C x h x w] sampled at arrays of pixel coordinates -> [P x C]."""
    c, h, w = plane.shape
    x0, y0 = np.floor(px).astype(int), np.floor(py).astype(int)
    out = np.zeros((px.size, c))
    for dy in (0, 1):
        for dx in (0, 1):
            xx, yy = x0 + dx, y0 + dy
            wt = (1 - np.abs(px - xx)) * (1 - np.abs(py - yy))
            ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            vals = np.zeros((px.size, c))
            vals[ok] = plane[:, yy[ok], xx[ok]].T
            out += wt[:, None] * vals
    return out


def oracle_zero_offset(seed: int) -> float:
    """Fresh attention samples every level at the reference point with uniform weights."""
    rng = np.random.default_rng([seed, 5])
    attn = DeformAttn(4, heads=1, points=2, levels=3, value_ratio=1.0, rng=rng)
    q, v = _random_seq(rng, 4), _random_seq(rng, 4)
    with no_tape():
        got = attn(q, v).data
        vp = attn.value_proj(v.tokens)
        maps = unflatten(v.with_tokens(vp))
    ref = reference_pixels(ORACLE_SHAPES, ORACLE_SHAPES, 1, 1)[:, 0, :, 0, :]
    mean = sum(_bilinear_zero_pad(mp.data, ref[:, lv, 0], ref[:, lv, 1])
               for lv, mp in enumerate(maps)) / 3.0
    want = mean @ attn.output_proj.weight.data.T + attn.output_proj.bias.data
    return float(np.abs(got - want).max())


ORACLES = {
    "deform_attn": oracle_deform,
    "conv2d": oracle_conv,
    "mhsa": oracle_mhsa,
    "mrfp": oracle_mrfp,
    "zero_offset_reference": oracle_zero_offset,
}


def cmd_oracle(seeds: int = 20, tol: float = 1e-10, first_seed: int = 0,
               kernels: tuple = (3, 5)) -> Report:
    """Every oracle over `seeds` cases; the MRFP case uses the given kernel set."""
    rep = Report()
    for name, fn in ORACLES.items():
        case = partial(fn, kernels=kernels) if fn is oracle_mrfp else fn
        worst = max(case(first_seed + s) for s in range(seeds))
        rep.check(f"oracle[{name}]", worst <= tol, f"max|d|={worst:.3e} over {seeds} seeds", f"{tol:.0e}")
    return rep


# parameter accounting

def cmd_params(cfg: CoMerConfig, allocate: Optional[bool] = None) -> Report:
    rep = Report()
    counts = param_count(cfg)
    for key in ("vit", "stem", "mrfp", "cti_to_vit", "cti_to_cnn", "quarter", "head", "total"):
        rep.info(f"params[{key}]", counts[key])
    rep.info("plain_vit", counts["plain_vit"])
    rep.info("overhead", counts["overhead"], "backbone minus plain ViT")
    target = OVERHEAD_TARGETS.get(cfg.variant)
    if target is not None:
        rel = counts["overhead"] / target - 1.0
        rep.check(f"overhead_vs_{target / 1e6:.0f}M", abs(rel) <= OVERHEAD_REL_TOL,
                  f"{counts['overhead'] / 1e6:.3f}M ({rel:+.1%})", f"+-{OVERHEAD_REL_TOL:.0%}")
    if allocate if allocate is not None else cfg.variant == "toy":
        alloc = allocated_count(CoMer(cfg))
        for key, n in alloc.items():
            rep.check(f"allocated[{key}]", n == counts[key], n, counts[key])
    return rep


# training

def cmd_train_toy(run: RunConfig, out_dir, log=None) -> Report:
    cfg = run.model
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, labels = make_dataset(run.data_seed, run.train_images, cfg.img_h, cfg.img_w,
                                  cfg.np_dtype)
    model = CoMer(cfg)
    rep = Report()
    csv = open(out_dir / "loss.csv", "w", encoding="utf-8")
    csv.write("step,loss\n")

    def on_step(step: int, value: float) -> None:
        csv.write(f"{step},{value!r}\n")
        if log is not None and (step % 50 == 0 or step == run.steps - 1):
            log(f"step {step} loss {value:.6f}")

    try:
        result = train(model, images, labels, run.steps, run.lr, run.momentum, run.batch,
                       run.clip_norm, on_step)
    except (DivergenceError, FloatingPointError) as exc:
        rep.check("training", False, str(exc), "finite and < 10x initial")
        return rep
    finally:
        csv.close()
    checkpoint.save(model, out_dir / "toy.vcmr")
    rep.info("initial_loss", f"{result.initial_loss:.6f}", f"ln 4 = {math.log(4):.6f}")
    rep.info("last_step_loss", f"{result.losses[-1]:.6f}" if result.losses else "n/a")
    rep.check("final_loss", result.final_loss < run.loss_target, f"{result.final_loss:.6f}",
              f"< {run.loss_target}")
    return rep


# feature export

BRANCHES = ("vit", "cnn", "fused")


def feature_maps(model: CoMer, image: np.ndarray) -> dict:
    """Channel-mean maps keyed by (branch, stride)."""
    with no_tape():
        out = model.forward(Tensor(image))
        gh, gw = out.cnn.level_shapes[1]
        vit_map = unflatten_map(out.vit, gh, gw)
        cnn = unflatten(out.cnn)
        maps = {}
        for s, c, f in zip(STRIDES, cnn, out.levels):
            _, h, w = c.shape
            maps[("vit", s)] = bilinear_resize(vit_map, h, w).data.mean(axis=0)
            maps[("cnn", s)] = c.data.mean(axis=0)
            maps[("fused", s)] = f.data.mean(axis=0)
    return maps


def cmd_export_features(model: CoMer, image: np.ndarray, out_dir) -> Report:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rep = Report()
    for (branch, stride), m in feature_maps(model, image).items():
        name = f"{branch}_{stride}.pgm"
        write_pgm(out_dir / name, normalize(m))
        rep.check(name, True, f"{m.shape[1]}x{m.shape[0]}", "P5")
    return rep
