"""Central finite-difference checks of tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, mul, reduce_sum, set_check_finite

# Relative errors are |a - n| / max(|a|, |n|, FLOOR). With an O(1) loss and
# eps = 1e-4 a central difference carries up to ~1e-10 of rounding noise
# (the loss's accumulated rounding error over 2 eps, growing with depth), so
# entries below FLOOR are effectively held to an absolute bound of
# tol * FLOOR. Exactly-zero gradients, such as the key bias under softmax
# shift invariance, land there.
FLOOR = 1e-5


def rel_error(analytic, numeric, floor: float = FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_function(fn: Callable, inputs: Sequence[np.ndarray], eps: float = 1e-4,
                   seed: int = 0) -> float:
    """Max relative error of d(sum(fn(*inputs) * R))/d(inputs) for a fixed random R."""
    params = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    with Tape():
        probe = fn(*[Tensor(p.data) for p in params])
    weights = Tensor(np.random.default_rng(seed).standard_normal(probe.shape))

    def scalar():
        return float(np.sum(fn(*[Tensor(p.data) for p in params]).data * weights.data))

    with Tape() as tape:
        loss = reduce_sum(mul(fn(*params), weights))
        tape.backward(loss)
    worst = 0.0
    for p in params:
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = scalar()
            flat[i] = old - eps
            down = scalar()
            flat[i] = old
            num.reshape(-1)[i] = (up - down) / (2 * eps)
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, float(rel_error(grad, num).max(initial=0.0)))
    return worst


def perturb(model, seed: int = 0, sigma: float = 0.1, offset_sigma: float = 0.01,
            offset_bias_sigma: float = 0.5) -> None:
    """Move every parameter off its (often degenerate) initial value.

    Sampling-offset weights get a small scale: bilinear sampling has kinks on
    integer pixel lines, and small offset sensitivity keeps finite-difference
    steps from straddling them. The offset bias places samples at generic
    sub-pixel positions.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        s = sigma
        if "sampling_offsets" in name:
            s = offset_bias_sigma if name.endswith("bias") else offset_sigma
        p.data = np.asarray(p.data + s * rng.standard_normal(p.shape), dtype=p.dtype)


def avoid_sampling_kinks(model, run: Callable, margin_grid: int = 4096) -> float:
    """Shift offset biases so no deformable sample sits near an integer pixel line.

    Bilinear sampling is only piecewise smooth; a central difference that
    straddles a grid line measures the mean of two one-sided slopes. Each bias
    entry moves one (head, level, point, axis) sample for every query, so a
    per-entry shift can clear all of them. Attention modules are processed in
    execution order because later samples depend on earlier ones.
    Returns the smallest distance to a grid line after the adjustment.
    """
    worst = 0.5
    shifts = np.arange(margin_grid) / margin_grid
    for attn in attention_modules(model):
        run(model)
        pix = attn.last_pix
        q = pix.shape[0]
        coords = pix.reshape(q, -1)
        bias = attn.sampling_offsets.bias.data
        for e in range(coords.shape[1]):
            frac = (coords[:, e][None, :] + shifts[:, None]) % 1.0
            dist = np.minimum(frac, 1.0 - frac).min(axis=1)
            best = int(np.argmax(dist))
            bias[e] += shifts[best]
            worst = min(worst, float(dist[best]))
    run(model)
    return worst


def attention_modules(model) -> list:
    out = []
    for i in range(model.cfg.stages):
        if model.cti_to_vit:
            out.append(model.cti_to_vit[i].attn)
        if model.cti_to_cnn:
            out.append(model.cti_to_cnn[i].attn)
    return out


def check_model(model, loss_fn: Callable, eps: float = 1e-4, samples: int = 4,
                seed: int = 0) -> dict:
    """Per-parameter max relative error between tape and central-difference gradients.

    ``loss_fn(model)`` returns a scalar Tensor. ``samples`` entries are drawn per
    parameter tensor (all entries when ``samples <= 0`` or the tensor is smaller).
    """
    rng = np.random.default_rng(seed)
    set_check_finite(True)
    model.zero_grad()
    with Tape() as tape:
        tape.backward(loss_fn(model))
    report = {}
    for name, p in model.named_parameters():
        flat = p.data.reshape(-1)
        if samples <= 0 or flat.size <= samples:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=samples, replace=False)
        grad = p.grad.reshape(-1) if p.grad is not None else np.zeros(flat.size)
        errs = []
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn(model).item()
            flat[i] = old - eps
            down = loss_fn(model).item()
            flat[i] = old
            num = (up - down) / (2 * eps)
            errs.append(float(rel_error(grad[i], num)))
        report[name] = max(errs)
    return report


def group_report(per_param: dict) -> dict:
    """Merge per-parameter errors across stages/blocks: drop numeric name parts."""
    groups: dict = {}
    for name, err in per_param.items():
        key = ".".join(p for p in name.split(".") if not p.isdigit())
        groups[key] = max(groups.get(key, 0.0), err)
    return groups
