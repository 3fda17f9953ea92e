"""Shared test utilities: finite-difference gradient checking and naive oracles."""

from __future__ import annotations

import numpy as np

from hykey.autodiff import Tape, Tensor


def gradcheck(fn, *arrays, h=1e-3, rtol=1e-3, atol=1e-6):
    """Compare tape gradients of a scalar-valued fn against central differences.

    Inputs are promoted to float64 so the difference quotient noise stays
    well under the tolerance floor; the analytic code path is identical
    for both dtypes.
    """
    # contiguity matters: the FD loop below mutates through a flat view
    tensors = [Tensor(np.ascontiguousarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
    assert out.size == 1, "gradcheck needs a scalar objective"
    tape.backward(out)

    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        assert flat.base is not None, "flat FD view must alias the tensor data"
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*tensors).item()
            flat[i] = orig - h
            fm = fn(*tensors).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        err = np.abs(analytic - numeric)
        tol = atol + rtol * np.abs(numeric)
        worst = (err - tol).max()
        assert (err <= tol).all(), (
            f"gradient mismatch (worst excess {worst:.3e}):\nanalytic=\n{analytic}\nnumeric=\n{numeric}"
        )


def conv3d_naive(x, w, b, stride=(2, 1, 1), padding=1):
    """Seven-loop reference for 3-D cross-correlation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    co, ci, ks, kh, kw = w.shape
    ss, sh, sw = stride
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (padding, padding)))
    so = (xp.shape[1] - ks) // ss + 1
    ho = (xp.shape[2] - kh) // sh + 1
    wo = (xp.shape[3] - kw) // sw + 1
    out = np.zeros((co, so, ho, wo))
    for o in range(co):
        for s in range(so):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for ds in range(ks):
                            for dh in range(kh):
                                for dw in range(kw):
                                    acc += w[o, c, ds, dh, dw] * xp[c, s * ss + ds, i * sh + dh, j * sw + dw]
                    out[o, s, i, j] = acc
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[:, None, None, None]
    return out


def conv2d_naive(x, w, b, padding=1):
    """Five-loop reference for 2-D cross-correlation, stride 1."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    co, ci, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = xp.shape[1] - kh + 1
    wo = xp.shape[2] - kw + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                out[o, i, j] = (w[o] * xp[:, i : i + kh, j : j + kw]).sum()
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[:, None, None]
    return out


def bilinear_naive(x, out_hw):
    """Per-pixel reference for half-pixel-aligned bilinear resize of (C,H,W)."""
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    ho, wo = out_hw
    out = np.zeros((c, ho, wo))
    for i in range(ho):
        sy = (i + 0.5) * h / ho - 0.5
        y0 = int(np.floor(sy))
        fy = sy - y0
        y0c, y1c = min(max(y0, 0), h - 1), min(max(y0 + 1, 0), h - 1)
        for j in range(wo):
            sx = (j + 0.5) * w / wo - 0.5
            x0 = int(np.floor(sx))
            fx = sx - x0
            x0c, x1c = min(max(x0, 0), w - 1), min(max(x0 + 1, 0), w - 1)
            out[:, i, j] = (
                x[:, y0c, x0c] * (1 - fy) * (1 - fx)
                + x[:, y0c, x1c] * (1 - fy) * fx
                + x[:, y1c, x0c] * fy * (1 - fx)
                + x[:, y1c, x1c] * fy * fx
            )
    return out
