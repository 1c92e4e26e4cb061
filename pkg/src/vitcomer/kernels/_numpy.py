"""Vectorized numpy kernels. Reference path; always available."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _cols(x, k, stride, pad, groups):
    c = x.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    return win.reshape(groups, c // groups, ho, wo, k, k)


def conv2d_forward(x, w, stride, pad, groups):
    o, _, k, _ = w.shape
    cols = _cols(x, k, stride, pad, groups)
    wg = w.reshape(groups, o // groups, w.shape[1], k, k)
    out = np.einsum("gcyxij,gocij->goyx", cols, wg, optimize=True)
    return out.reshape(o, out.shape[2], out.shape[3])


def conv2d_backward(x, w, g, stride, pad, groups):
    c, h, wd = x.shape
    o, cg, k, _ = w.shape
    ho, wo = g.shape[1], g.shape[2]
    cols = _cols(x, k, stride, pad, groups)
    gg = g.reshape(groups, o // groups, ho, wo)
    wg = w.reshape(groups, o // groups, cg, k, k)
    gw = np.einsum("goyx,gcyxij->gocij", gg, cols, optimize=True).reshape(w.shape)
    gcols = np.einsum("goyx,gocij->gcyxij", gg, wg, optimize=True).reshape(c, ho, wo, k, k)
    gxp = np.zeros((c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, i, j]
    return gxp[:, pad:pad + h, pad:pad + wd], gw


def _corners(pix, shapes, starts):
    """Corner indices and bilinear weights for every sample, zero outside the map."""
    lvl_h = shapes[:, 0][None, None, :, None].astype(pix.dtype)
    lvl_w = shapes[:, 1][None, None, :, None].astype(pix.dtype)
    px, py = pix[..., 0], pix[..., 1]
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx, fy = px - x0, py - y0
    out = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xx, yy = x0 + dx, y0 + dy
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        valid = (xx >= 0) & (xx <= lvl_w - 1) & (yy >= 0) & (yy <= lvl_h - 1)
        xi = np.where(valid, xx, 0).astype(np.int64)
        yi = np.where(valid, yy, 0).astype(np.int64)
        idx = starts[None, None, :, None] + yi * shapes[:, 1][None, None, :, None] + xi
        out.append((dy, dx, idx, wx, wy, valid))
    return out, fx, fy


def deform_forward(value, shapes, starts, pix, attw):
    q, nh = pix.shape[0], pix.shape[1]
    heads = np.arange(nh)[None, :, None, None]
    out = np.zeros((q, nh, value.shape[2]), dtype=value.dtype)
    corners, _, _ = _corners(pix, shapes, starts)
    for _, _, idx, wx, wy, valid in corners:
        wgt = np.where(valid, wx * wy, 0.0) * attw
        out += np.einsum("qhlk,qhlkd->qhd", wgt, value[idx, heads])
    return out


def deform_backward(value, shapes, starts, pix, attw, g):
    nh = pix.shape[1]
    heads = np.arange(nh)[None, :, None, None]
    gvalue = np.zeros_like(value)
    gpix = np.zeros_like(pix)
    gattw = np.zeros_like(attw)
    corners, fx, fy = _corners(pix, shapes, starts)
    for dy, dx, idx, wx, wy, valid in corners:
        v = value[idx, heads]
        vg = np.einsum("qhlkd,qhd->qhlk", v, g)
        vg = np.where(valid, vg, 0.0)
        wgt = np.where(valid, wx * wy, 0.0)
        gattw += wgt * vg
        sx = 1.0 if dx else -1.0
        sy = 1.0 if dy else -1.0
        gpix[..., 0] += attw * vg * sx * wy
        gpix[..., 1] += attw * vg * sy * wx
        contrib = (wgt * attw)[..., None] * g[:, :, None, None, :]
        np.add.at(gvalue, (idx, np.broadcast_to(heads, idx.shape)), contrib)
    return gvalue, gpix, gattw
