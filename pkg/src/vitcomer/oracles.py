"""Brute-force loop oracles.

Each oracle recomputes an operation with explicit scalar loops over plain
Python lists and shares no code with the tensor/kernel path.
"""
from __future__ import annotations

import math

import numpy as np


def _affine(weight, bias, vec):
    """weight [out x in] (nested lists), bias [out], vec [in]."""
    return [bias[o] + sum(weight[o][i] * vec[i] for i in range(len(vec)))
            for o in range(len(weight))]


def conv2d(x, kernel, bias, stride=1, padding=0, groups=1):
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    c, h, w = x.shape
    o, cg, k, _ = kernel.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    per_group = o // groups
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        g = oc // per_group
        for y in range(ho):
            for xx in range(wo):
                acc = 0.0 if bias is None else float(bias[oc])
                for ci in range(cg):
                    ic = g * cg + ci
                    for i in range(k):
                        for j in range(k):
                            iy = y * stride + i - padding
                            ix = xx * stride + j - padding
                            if 0 <= iy < h and 0 <= ix < w:
                                acc += x[ic, iy, ix] * kernel[oc, ci, i, j]
                out[oc, y, xx] = acc
    return out


def mhsa(x, qkv_w, qkv_b, proj_w, proj_b, heads):
    x = np.asarray(x, dtype=np.float64).tolist()
    qkv_w, qkv_b = np.asarray(qkv_w).tolist(), np.asarray(qkv_b).tolist()
    proj_w, proj_b = np.asarray(proj_w).tolist(), np.asarray(proj_b).tolist()
    n, d = len(x), len(x[0])
    dh = d // heads
    qkv = [_affine(qkv_w, qkv_b, row) for row in x]
    cat = [[0.0] * d for _ in range(n)]
    for h in range(heads):
        for i in range(n):
            scores = []
            for j in range(n):
                s = sum(qkv[i][h * dh + c] * qkv[j][d + h * dh + c] for c in range(dh))
                scores.append(s / math.sqrt(dh))
            top = max(scores)
            ex = [math.exp(s - top) for s in scores]
            z = sum(ex)
            for c in range(dh):
                cat[i][h * dh + c] = sum(ex[j] / z * qkv[j][2 * d + h * dh + c] for j in range(n))
    return np.array([_affine(proj_w, proj_b, row) for row in cat])


def bilinear_point(plane, px, py):
    """Zero-padded bilinear value of a 2-d list `plane` at pixel coordinate (px, py)."""
    h, w = len(plane), len(plane[0])
    x0, y0 = math.floor(px), math.floor(py)
    fx, fy = px - x0, py - y0
    total = 0.0
    for yy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for xx, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * plane[yy][xx]
    return total


def deform_attn(query, value, level_shapes, params, heads, points):
    """Multi-scale deformable attention with every query, head, level and point looped.

    params: dict of numpy arrays query_proj/sampling_offsets/attention_weights/
    value_proj/output_proj, each with ".weight" and ".bias".
    """
    p = {k: np.asarray(v, dtype=np.float64).tolist() for k, v in params.items()}
    query = np.asarray(query, dtype=np.float64).tolist()
    value = np.asarray(value, dtype=np.float64).tolist()
    levels = len(level_shapes)
    starts, acc = [], 0
    for h, w in level_shapes:
        starts.append(acc)
        acc += h * w
    vproj = [_affine(p["value_proj.weight"], p["value_proj.bias"], row) for row in value]
    vd = len(vproj[0])
    dh = vd // heads
    # reference point of every query in normalized coordinates
    refs = []
    for h, w in level_shapes:
        for i in range(h):
            for j in range(w):
                refs.append(((j + 0.5) / w, (i + 0.5) / h))
    out = []
    for qi, row in enumerate(query):
        q = _affine(p["query_proj.weight"], p["query_proj.bias"], row)
        off = _affine(p["sampling_offsets.weight"], p["sampling_offsets.bias"], q)
        logit = _affine(p["attention_weights.weight"], p["attention_weights.bias"], q)
        cat = [0.0] * vd
        for hd in range(heads):
            base = hd * levels * points
            seg = logit[base:base + levels * points]
            top = max(seg)
            ex = [math.exp(s - top) for s in seg]
            z = sum(ex)
            for lv, (h, w) in enumerate(level_shapes):
                for k in range(points):
                    a = ex[lv * points + k] / z
                    o = ((hd * levels + lv) * points + k) * 2
                    px = refs[qi][0] * w - 0.5 + off[o]
                    py = refs[qi][1] * h - 0.5 + off[o + 1]
                    for c in range(dh):
                        plane = [[vproj[starts[lv] + yy * w + xx][hd * dh + c] for xx in range(w)]
                                 for yy in range(h)]
                        cat[hd * dh + c] += a * bilinear_point(plane, px, py)
        out.append(_affine(p["output_proj.weight"], p["output_proj.bias"], cat))
    return np.array(out)


def mrfp(tokens, level_shapes, params, kernel_sizes):
    """FC down, contiguous channel groups through depthwise convs per level, FC up."""
    t = np.asarray(tokens, dtype=np.float64).tolist()
    down = [_affine(np.asarray(params["fc_down.weight"]).tolist(),
                    np.asarray(params["fc_down.bias"]).tolist(), row) for row in t]
    width = len(down[0])
    gc = width // len(kernel_sizes)
    mixed = []
    start = 0
    for h, w in level_shapes:
        plane = np.zeros((width, h, w))
        for i in range(h):
            for j in range(w):
                for c in range(width):
                    plane[c, i, j] = down[start + i * w + j][c]
        res = np.zeros_like(plane)
        for g, k in enumerate(kernel_sizes):
            sl = slice(g * gc, (g + 1) * gc)
            res[sl] = conv2d(plane[sl], params[f"convs.{g}.kernel"], params[f"convs.{g}.bias"],
                             1, k // 2, gc)
        for i in range(h):
            for j in range(w):
                mixed.append([res[c, i, j] for c in range(width)])
        start += h * w
    up_w = np.asarray(params["fc_up.weight"]).tolist()
    up_b = np.asarray(params["fc_up.bias"]).tolist()
    return np.array([_affine(up_w, up_b, row) for row in mixed])
