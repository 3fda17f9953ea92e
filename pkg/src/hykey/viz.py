"""Standalone SVG rendering: threshold-curve line plots and match overlays.

Everything returns an SVG document as a string; callers decide where to
write it. Raster content (the pseudo-RGB views) is embedded as base64
PNG so the files stay self-contained.
"""

from __future__ import annotations

import base64
import io
from xml.sax.saxutils import escape

import numpy as np

__all__ = [
    "line_plot_svg",
    "pseudo_rgb",
    "match_overlay_svg",
    "GREEN",
    "RED",
    "GRAY",
]

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
GREEN = "#21a15a"
RED = "#d63c3c"
GRAY = "#8a8a8a"


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def line_plot_svg(x, series: dict[str, list], title: str = "",
                  xlabel: str = "", ylabel: str = "",
                  ylim: tuple[float, float] | None = None,
                  size: tuple[int, int] = (560, 360)) -> str:
    """A minimal line chart: one polyline per named series."""
    x = [float(v) for v in x]
    if not x or not series:
        raise ValueError("line_plot_svg needs x values and at least one series")
    for name, ys in series.items():
        if len(ys) != len(x):
            raise ValueError(f"series {name!r} length does not match x")
    width, height = size
    ml, mr, mt, mb = 56, 16, 34, 44
    pw, ph = width - ml - mr, height - mt - mb

    all_y = [float(v) for ys in series.values() for v in ys]
    lo, hi = (min(all_y), max(all_y)) if ylim is None else ylim
    if hi <= lo:
        hi = lo + 1.0
    x0, x1 = min(x), max(x)
    if x1 <= x0:
        x1 = x0 + 1.0

    def sx(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return mt + (1.0 - (v - lo) / (hi - lo)) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    # gridlines and y ticks
    for i in range(5):
        v = lo + (hi - lo) * i / 4
        y = sy(v)
        parts.append(f'<line x1="{ml}" y1="{y:.1f}" x2="{ml + pw}" y2="{y:.1f}" '
                     f'stroke="#ddd" stroke-width="1"/>')
        parts.append(f'<text x="{ml - 6}" y="{y + 4:.1f}" text-anchor="end">{_fmt(v)}</text>')
    for v in x:
        px = sx(v)
        parts.append(f'<line x1="{px:.1f}" y1="{mt + ph}" x2="{px:.1f}" y2="{mt + ph + 4}" '
                     f'stroke="#444" stroke-width="1"/>')
        parts.append(f'<text x="{px:.1f}" y="{mt + ph + 16}" text-anchor="middle">{_fmt(v)}</text>')
    # axes
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="#444"/>')
    parts.append(f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="#444"/>')
    parts.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    parts.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{escape(ylabel)}</text>')
    # series
    for i, (name, ys) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(vx):.1f},{sy(float(vy)):.1f}" for vx, vy in zip(x, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for vx, vy in zip(x, ys):
            parts.append(f'<circle cx="{sx(vx):.1f}" cy="{sy(float(vy)):.1f}" r="2.5" fill="{color}"/>')
        if len(series) > 1:
            ly = mt + 14 + 14 * i
            parts.append(f'<line x1="{ml + pw - 90}" y1="{ly}" x2="{ml + pw - 70}" y2="{ly}" '
                         f'stroke="{color}" stroke-width="2"/>')
            parts.append(f'<text x="{ml + pw - 64}" y="{ly + 4}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


RGB_TARGETS_NM = (600.0, 540.0, 460.0)


def pseudo_rgb(data: np.ndarray, wavelengths_nm) -> np.ndarray:
    """(H, W, 3) uint8 image from the bands nearest 600/540/460 nm."""
    data = np.asarray(data)
    wl = np.asarray(wavelengths_nm, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] != len(wl):
        raise ValueError(f"expected (bands, H, W) with {len(wl)} bands, got {data.shape}")
    channels = [data[int(np.argmin(np.abs(wl - target)))] for target in RGB_TARGETS_NM]
    img = np.stack(channels, axis=-1)
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _png_data_uri(img: np.ndarray) -> str:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(img, mode="RGB").save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def match_overlay_svg(rgb0: np.ndarray, rgb1: np.ndarray,
                      kpts0: np.ndarray, kpts1: np.ndarray,
                      matches: np.ndarray,
                      correct: np.ndarray | None = None,
                      gap: int = 16, scale: int = 1) -> str:
    """Side-by-side views with one line per match.

    With ``correct`` given (boolean per match), lines are green/red;
    otherwise neutral gray. Exactly ``len(matches)`` <line> elements are
    emitted, in match order.
    """
    kpts0 = np.asarray(kpts0, dtype=np.float64).reshape(-1, 2)
    kpts1 = np.asarray(kpts1, dtype=np.float64).reshape(-1, 2)
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    if correct is not None and len(correct) != len(matches):
        raise ValueError("correct flags must align with matches")
    h0, w0 = rgb0.shape[:2]
    h1, w1 = rgb1.shape[:2]
    ox = (w0 + gap) * scale  # x offset of the right view
    width = (w0 + gap + w1) * scale
    height = max(h0, h1) * scale
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#111"/>',
        f'<image x="0" y="0" width="{w0 * scale}" height="{h0 * scale}" '
        f'preserveAspectRatio="none" image-rendering="pixelated" href="{_png_data_uri(rgb0)}"/>',
        f'<image x="{ox}" y="0" width="{w1 * scale}" height="{h1 * scale}" '
        f'preserveAspectRatio="none" image-rendering="pixelated" href="{_png_data_uri(rgb1)}"/>',
    ]
    for n, (i, j) in enumerate(matches):
        x0, y0 = kpts0[i] * scale
        x1, y1 = kpts1[j] * scale
        if correct is None:
            color = GRAY
        else:
            color = GREEN if correct[n] else RED
        parts.append(f'<line x1="{x0:.1f}" y1="{y0:.1f}" x2="{x1 + ox:.1f}" y2="{y1:.1f}" '
                     f'stroke="{color}" stroke-width="1" stroke-opacity="0.75"/>')
    for x, y in kpts0 * scale:
        parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="1.5" fill="none" stroke="#ffd54a" stroke-width="0.8"/>')
    for x, y in kpts1 * scale:
        parts.append(f'<circle cx="{x + ox:.1f}" cy="{y:.1f}" r="1.5" fill="none" stroke="#ffd54a" stroke-width="0.8"/>')
    parts.append("</svg>")
    return "\n".join(parts)
