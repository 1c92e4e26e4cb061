"""Loop kernels compiled with numba; same contracts as the numpy path."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def _conv_fwd(x, w, stride, pad, groups, out):
    c, h, wd = x.shape
    o, cg, k, _ = w.shape
    og = o // groups
    ho, wo = out.shape[1], out.shape[2]
    for oc in range(o):
        g = oc // og
        for y in range(ho):
            for xx in range(wo):
                acc = 0.0
                for ci in range(cg):
                    ic = g * cg + ci
                    for i in range(k):
                        iy = y * stride - pad + i
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(k):
                            ix = xx * stride - pad + j
                            if ix < 0 or ix >= wd:
                                continue
                            acc += x[ic, iy, ix] * w[oc, ci, i, j]
                out[oc, y, xx] = acc


@njit(cache=True)
def _conv_bwd(x, w, g, stride, pad, groups, gx, gw):
    c, h, wd = x.shape
    o, cg, k, _ = w.shape
    og = o // groups
    ho, wo = g.shape[1], g.shape[2]
    for oc in range(o):
        grp = oc // og
        for y in range(ho):
            for xx in range(wo):
                go = g[oc, y, xx]
                if go == 0.0:
                    continue
                for ci in range(cg):
                    ic = grp * cg + ci
                    for i in range(k):
                        iy = y * stride - pad + i
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(k):
                            ix = xx * stride - pad + j
                            if ix < 0 or ix >= wd:
                                continue
                            gw[oc, ci, i, j] += go * x[ic, iy, ix]
                            gx[ic, iy, ix] += go * w[oc, ci, i, j]


def conv2d_forward(x, w, stride, pad, groups):
    k = w.shape[2]
    ho = (x.shape[1] + 2 * pad - k) // stride + 1
    wo = (x.shape[2] + 2 * pad - k) // stride + 1
    out = np.zeros((w.shape[0], ho, wo), dtype=x.dtype)
    _conv_fwd(x, w, stride, pad, groups, out)
    return out


def conv2d_backward(x, w, g, stride, pad, groups):
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    _conv_bwd(x, w, np.ascontiguousarray(g), stride, pad, groups, gx, gw)
    return gx, gw


@njit(cache=True)
def _deform_fwd(value, shapes, starts, pix, attw, out):
    nq, nh, nl, nk, _ = pix.shape
    dh = value.shape[2]
    for q in range(nq):
        for hd in range(nh):
            for l in range(nl):
                lh = shapes[l, 0]
                lw = shapes[l, 1]
                base = starts[l]
                for kk in range(nk):
                    a = attw[q, hd, l, kk]
                    px = pix[q, hd, l, kk, 0]
                    py = pix[q, hd, l, kk, 1]
                    x0 = math.floor(px)
                    y0 = math.floor(py)
                    fx = px - x0
                    fy = py - y0
                    for dy in range(2):
                        yy = int(y0) + dy
                        if yy < 0 or yy >= lh:
                            continue
                        wy = fy if dy == 1 else 1.0 - fy
                        for dx in range(2):
                            xx = int(x0) + dx
                            if xx < 0 or xx >= lw:
                                continue
                            wx = fx if dx == 1 else 1.0 - fx
                            wgt = a * wx * wy
                            row = base + yy * lw + xx
                            for d in range(dh):
                                out[q, hd, d] += wgt * value[row, hd, d]


@njit(cache=True)
def _deform_bwd(value, shapes, starts, pix, attw, g, gvalue, gpix, gattw):
    nq, nh, nl, nk, _ = pix.shape
    dh = value.shape[2]
    for q in range(nq):
        for hd in range(nh):
            for l in range(nl):
                lh = shapes[l, 0]
                lw = shapes[l, 1]
                base = starts[l]
                for kk in range(nk):
                    a = attw[q, hd, l, kk]
                    px = pix[q, hd, l, kk, 0]
                    py = pix[q, hd, l, kk, 1]
                    x0 = math.floor(px)
                    y0 = math.floor(py)
                    fx = px - x0
                    fy = py - y0
                    ga = 0.0
                    gx = 0.0
                    gy = 0.0
                    for dy in range(2):
                        yy = int(y0) + dy
                        if yy < 0 or yy >= lh:
                            continue
                        wy = fy if dy == 1 else 1.0 - fy
                        sy = 1.0 if dy == 1 else -1.0
                        for dx in range(2):
                            xx = int(x0) + dx
                            if xx < 0 or xx >= lw:
                                continue
                            wx = fx if dx == 1 else 1.0 - fx
                            sx = 1.0 if dx == 1 else -1.0
                            row = base + yy * lw + xx
                            vg = 0.0
                            for d in range(dh):
                                vg += value[row, hd, d] * g[q, hd, d]
                                gvalue[row, hd, d] += a * wx * wy * g[q, hd, d]
                            ga += wx * wy * vg
                            gx += a * vg * sx * wy
                            gy += a * vg * sy * wx
                    gattw[q, hd, l, kk] = ga
                    gpix[q, hd, l, kk, 0] = gx
                    gpix[q, hd, l, kk, 1] = gy


def deform_forward(value, shapes, starts, pix, attw):
    out = np.zeros((pix.shape[0], pix.shape[1], value.shape[2]), dtype=value.dtype)
    _deform_fwd(value, shapes, starts, pix, attw, out)
    return out


def deform_backward(value, shapes, starts, pix, attw, g):
    gvalue = np.zeros_like(value)
    gpix = np.zeros_like(pix)
    gattw = np.zeros_like(attw)
    _deform_bwd(value, shapes, starts, pix, attw, np.ascontiguousarray(g),
                gvalue, gpix, gattw)
    return gvalue, gpix, gattw
