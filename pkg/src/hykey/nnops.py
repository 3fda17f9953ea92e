"""Convolution, pooling, resampling, and window-gather operations.

All operations here work on single samples (no batch axis): volumetric
tensors are ``(C, S, H, W)`` and planar tensors ``(C, H, W)``. Each op
is recorded on the active tape as one fused node with a hand-written
backward closure; the heavy lifting is shifted-slice ``tensordot``
contractions so no im2col buffer larger than the output is ever built.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, _apply, as_tensor

__all__ = [
    "conv3d",
    "conv2d",
    "maxpool_spatial",
    "upsample_bilinear",
    "grid_sample",
    "extract_windows",
]


def conv3d(x: Tensor, w: Tensor, b: Tensor | None, stride=(2, 1, 1), padding: int = 1) -> Tensor:
    """3-D cross-correlation over a (C_in, S, H, W) volume.

    ``w`` is (C_out, C_in, kS, kH, kW). Output spectral/spatial extents
    follow floor((n + 2*padding - k) / stride) + 1 per axis.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"conv3d expects x (C,S,H,W) and w (O,C,kS,kH,kW), got {x.shape}, {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: x has {x.shape[0]}, w expects {w.shape[1]}")
    c_out, c_in, ks, kh, kw = w.shape
    ss, sh, sw = stride
    pad = padding
    xd = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    _, sp, hp, wp = xd.shape
    so = (sp - ks) // ss + 1
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    if so < 1 or ho < 1 or wo < 1:
        raise ShapeError(f"conv3d input {x.shape} too small for kernel {w.shape[2:]}")

    def patch_of(src, ds, dh, dw):
        return src[:, ds : ds + ss * (so - 1) + 1 : ss,
                   dh : dh + sh * (ho - 1) + 1 : sh,
                   dw : dw + sw * (wo - 1) + 1 : sw]

    out = np.zeros((c_out, so, ho, wo), dtype=x.dtype)
    for ds in range(ks):
        for dh in range(kh):
            for dw in range(kw):
                out += np.tensordot(w.data[:, :, ds, dh, dw], patch_of(xd, ds, dh, dw), axes=([1], [0]))
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None, None, None]

    def backward(g):
        gw = np.zeros_like(w.data)
        gx_pad = np.zeros_like(xd)
        for ds in range(ks):
            for dh in range(kh):
                for dw in range(kw):
                    patch = patch_of(xd, ds, dh, dw)
                    gw[:, :, ds, dh, dw] = np.tensordot(g, patch, axes=([1, 2, 3], [1, 2, 3]))
                    patch_of(gx_pad, ds, dh, dw)[...] += np.tensordot(
                        w.data[:, :, ds, dh, dw], g, axes=([0], [0])
                    )
        gx = gx_pad[:, pad : pad + x.shape[1], pad : pad + x.shape[2], pad : pad + x.shape[3]]
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(1, 2, 3)))

    inputs = (x, w) if b is None else (x, w, b)
    return _apply(inputs, out, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, padding: int = 1) -> Tensor:
    """2-D cross-correlation over a (C_in, H, W) map, stride 1."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x (C,H,W) and w (O,C,kH,kW), got {x.shape}, {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: x has {x.shape[0]}, w expects {w.shape[1]}")
    c_out, c_in, kh, kw = w.shape
    pad = padding
    xd = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    _, hp, wp = xd.shape
    ho = hp - kh + 1
    wo = wp - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d input {x.shape} too small for kernel ({kh},{kw})")

    out = np.zeros((c_out, ho, wo), dtype=x.dtype)
    for dh in range(kh):
        for dw in range(kw):
            out += np.tensordot(w.data[:, :, dh, dw], xd[:, dh : dh + ho, dw : dw + wo], axes=([1], [0]))
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None, None]

    def backward(g):
        gw = np.zeros_like(w.data)
        gx_pad = np.zeros_like(xd)
        for dh in range(kh):
            for dw in range(kw):
                gw[:, :, dh, dw] = np.tensordot(g, xd[:, dh : dh + ho, dw : dw + wo], axes=([1, 2], [1, 2]))
                gx_pad[:, dh : dh + ho, dw : dw + wo] += np.tensordot(w.data[:, :, dh, dw], g, axes=([0], [0]))
        gx = gx_pad[:, pad : pad + x.shape[1], pad : pad + x.shape[2]]
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(1, 2)))

    inputs = (x, w) if b is None else (x, w, b)
    return _apply(inputs, out, backward)


def maxpool_spatial(x: Tensor) -> Tensor:
    """2x2 spatial max pooling (stride 2) applied to the last two axes.

    Works for (C, S, H, W) and (C, H, W) alike; odd trailing rows or
    columns are dropped. Ties go to the first element in row-major
    window order so backward is deterministic.
    """
    x = as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"maxpool_spatial needs spatial extent >= 2, got {x.shape}")
    lead = x.shape[:-2]
    win = x.data[..., : h2 * 2, : w2 * 2].reshape(lead + (h2, 2, w2, 2))
    win = np.moveaxis(win, -3, -2).reshape(lead + (h2, w2, 4))
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros(lead + (h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gwin = np.moveaxis(gwin.reshape(lead + (h2, w2, 2, 2)), -2, -3)
        gx = np.zeros_like(x.data)
        gx[..., : h2 * 2, : w2 * 2] = gwin.reshape(lead + (h2 * 2, w2 * 2))
        return (gx,)

    return _apply((x,), out, backward)


def _resample_axis(n_in: int, n_out: int):
    """Half-pixel-aligned source indices and lerp weights for one axis."""
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    return i0c, i1c, frac


def upsample_bilinear(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize of a (C, H, W) map using half-pixel centre alignment."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"upsample_bilinear expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    ho, wo = out_hw
    r0, r1, fr = _resample_axis(h, ho)
    c0, c1, fc = _resample_axis(w, wo)
    fr = fr.astype(x.dtype)[None, :, None]
    fc = fc.astype(x.dtype)[None, None, :]

    rows = x.data[:, r0, :] * (1.0 - fr) + x.data[:, r1, :] * fr
    out = rows[:, :, c0] * (1.0 - fc) + rows[:, :, c1] * fc

    def backward(g):
        grows = np.zeros((c, ho, w), dtype=g.dtype)
        np.add.at(grows.transpose(2, 0, 1), c0, (g * (1.0 - fc)).transpose(2, 0, 1))
        np.add.at(grows.transpose(2, 0, 1), c1, (g * fc).transpose(2, 0, 1))
        gx = np.zeros_like(x.data)
        np.add.at(gx.transpose(1, 0, 2), r0, (grows * (1.0 - fr)).transpose(1, 0, 2))
        np.add.at(gx.transpose(1, 0, 2), r1, (grows * fr).transpose(1, 0, 2))
        return (gx,)

    return _apply((x,), out, backward)


def grid_sample(m: Tensor, points: Tensor) -> Tensor:
    """Bilinear sampling of a (C, H, W) map at (N, 2) ``(x, y)`` pixel points.

    Returns (N, C). Sampling clamps to the border; the spatial gradient
    with respect to a clamped coordinate is zero, and the map gradient
    scatters into the clamped cells.
    """
    m, points = as_tensor(m), as_tensor(points)
    if m.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"grid_sample expects map (C,H,W) and points (N,2), got {m.shape}, {points.shape}")
    c, h, w = m.shape
    px = points.data[:, 0].astype(np.float64)
    py = points.data[:, 1].astype(np.float64)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = (px - x0).astype(m.dtype)
    fy = (py - y0).astype(m.dtype)
    x0i = np.clip(x0.astype(np.int64), 0, w - 1)
    x1i = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    y0i = np.clip(y0.astype(np.int64), 0, h - 1)
    y1i = np.clip(y0.astype(np.int64) + 1, 0, h - 1)

    flat = m.data.reshape(c, h * w)
    i00 = y0i * w + x0i
    i01 = y0i * w + x1i
    i10 = y1i * w + x0i
    i11 = y1i * w + x1i
    v00 = flat[:, i00].T
    v01 = flat[:, i01].T
    v10 = flat[:, i10].T
    v11 = flat[:, i11].T
    w00 = ((1 - fy) * (1 - fx))[:, None]
    w01 = ((1 - fy) * fx)[:, None]
    w10 = (fy * (1 - fx))[:, None]
    w11 = (fy * fx)[:, None]
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    def backward(g):
        gm = gp = None
        if m.requires_grad:
            buf = np.zeros((h * w, c), dtype=g.dtype)
            np.add.at(buf, i00, g * w00)
            np.add.at(buf, i01, g * w01)
            np.add.at(buf, i10, g * w10)
            np.add.at(buf, i11, g * w11)
            gm = buf.T.reshape(c, h, w)
        if points.requires_grad:
            # clamped corners coincide outside the map, so these differences
            # vanish there and the point gradient is zero as required
            dx = (1 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)
            dy = (1 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)
            gp = np.stack([(g * dx).sum(axis=1), (g * dy).sum(axis=1)], axis=1).astype(points.dtype)
        return (gm, gp)

    return _apply((m, points), out, backward)


def extract_windows(m: Tensor, centers: np.ndarray, radius: int, pad_value: float = -1e4) -> Tensor:
    """Gather square windows of a 2-D map around integer centres.

    ``m`` is (H, W); ``centers`` is an integer (N, 2) array in (x, y)
    order. Returns (N, (2*radius+1)**2) in row-major window order with
    out-of-map cells filled by ``pad_value`` (low enough that softmax
    weights underflow to zero). Differentiable in ``m`` only.
    """
    m = as_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"extract_windows expects (H,W), got {m.shape}")
    h, w = m.shape
    centers = np.asarray(centers, dtype=np.int64)
    k = 2 * radius + 1
    off = np.arange(-radius, radius + 1)
    rows = centers[:, 1, None, None] + off[None, :, None]
    cols = centers[:, 0, None, None] + off[None, None, :]
    valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    rc = np.clip(rows, 0, h - 1)
    cc = np.clip(cols, 0, w - 1)
    vals = np.where(valid, m.data[rc, cc], np.asarray(pad_value, dtype=m.dtype))
    out = vals.reshape(len(centers), k * k)

    def backward(g):
        gm = np.zeros_like(m.data)
        gwin = (g.reshape(len(centers), k, k) * valid).astype(m.dtype, copy=False)
        np.add.at(gm, (rc, cc), gwin)
        return (gm,)

    return _apply((m,), out, backward)
