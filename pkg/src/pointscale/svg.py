"""Minimal hand-rolled SVG rendering for diagnostic plots.

Only what the reports need: multi-series line plots with optional log axes,
and simple histograms. No external plotting dependency.
"""

from __future__ import annotations

import math

import numpy as np

_PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 70, 20, 36, 48


def _ticks(lo: float, hi: float, log: bool):
    if log:
        lo_e = math.floor(math.log10(lo))
        hi_e = math.ceil(math.log10(hi))
        return [10.0**e for e in range(lo_e, hi_e + 1)]
    span = hi - lo
    if span <= 0:
        return [lo]
    step = 10 ** math.floor(math.log10(span / 4))
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= 6:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-12 * abs(span):
        ticks.append(t)
        t += step
    return ticks


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.0e}"
    return f"{v:g}"


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
            f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
            f'<text x="{(_ML + _W - _MR) / 2}" y="{_H - 10}" text-anchor="middle">{xlabel}</text>',
            f'<text x="16" y="{(_MT + _H - _MB) / 2}" text-anchor="middle" '
            f'transform="rotate(-90 16 {(_MT + _H - _MB) / 2})">{ylabel}</text>',
            f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" height="{_H - _MT - _MB}" '
            f'fill="none" stroke="#333"/>',
        ]

    def add(self, fragment: str) -> None:
        self.parts.append(fragment)

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"])


def _scaler(lo: float, hi: float, px_lo: float, px_hi: float, log: bool):
    if log:
        lo, hi = math.log10(lo), math.log10(hi)

    def to_px(v):
        t = math.log10(v) if log else v
        frac = 0.5 if hi == lo else (t - lo) / (hi - lo)
        return px_lo + frac * (px_hi - px_lo)

    return to_px


def line_plot(
    series,
    path,
    *,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    log_x: bool = False,
    log_y: bool = False,
) -> None:
    """Render (label, xs, ys) series as polylines with axes and a legend.

    Log-scaled axes drop non-positive values from the affected series.
    """
    cleaned = []
    for label, xs, ys in series:
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        keep = np.isfinite(xs) & np.isfinite(ys)
        if log_x:
            keep &= xs > 0
        if log_y:
            keep &= ys > 0
        if keep.any():
            cleaned.append((label, xs[keep], ys[keep]))
    canvas = _Canvas(title, xlabel, ylabel)
    if cleaned:
        x_lo = min(s[1].min() for s in cleaned)
        x_hi = max(s[1].max() for s in cleaned)
        y_lo = min(s[2].min() for s in cleaned)
        y_hi = max(s[2].max() for s in cleaned)
        if not log_x and x_lo == x_hi:
            x_lo, x_hi = x_lo - 1, x_hi + 1
        if not log_y and y_lo == y_hi:
            y_lo, y_hi = y_lo - 1, y_hi + 1
        sx = _scaler(x_lo, x_hi, _ML, _W - _MR, log_x)
        sy = _scaler(y_lo, y_hi, _H - _MB, _MT, log_y)
        for t in _ticks(x_lo, x_hi, log_x):
            if x_lo <= t <= x_hi:
                px = sx(t)
                canvas.add(f'<line x1="{px:.1f}" y1="{_H - _MB}" x2="{px:.1f}" '
                           f'y2="{_H - _MB + 4}" stroke="#333"/>')
                canvas.add(f'<text x="{px:.1f}" y="{_H - _MB + 16}" '
                           f'text-anchor="middle">{_fmt(t)}</text>')
        for t in _ticks(y_lo, y_hi, log_y):
            if y_lo <= t <= y_hi:
                py = sy(t)
                canvas.add(f'<line x1="{_ML - 4}" y1="{py:.1f}" x2="{_ML}" '
                           f'y2="{py:.1f}" stroke="#333"/>')
                canvas.add(f'<text x="{_ML - 7}" y="{py + 4:.1f}" '
                           f'text-anchor="end">{_fmt(t)}</text>')
        for i, (label, xs, ys) in enumerate(cleaned):
            color = _PALETTE[i % len(_PALETTE)]
            pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
            canvas.add(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                       f'stroke-width="1.5"/>')
            if label and i < 12:
                ly = _MT + 14 + 14 * i
                canvas.add(f'<line x1="{_W - _MR - 90}" y1="{ly - 4}" '
                           f'x2="{_W - _MR - 74}" y2="{ly - 4}" stroke="{color}" '
                           f'stroke-width="2"/>')
                canvas.add(f'<text x="{_W - _MR - 70}" y="{ly}">{label}</text>')
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canvas.render())


def histogram(
    values,
    path,
    *,
    bins: int = 30,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "count",
) -> None:
    """Render a bar histogram of finite values."""
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    canvas = _Canvas(title, xlabel, ylabel)
    if len(values):
        counts, edges = np.histogram(values, bins=bins)
        sx = _scaler(edges[0], edges[-1] if edges[-1] > edges[0] else edges[0] + 1,
                     _ML, _W - _MR, False)
        top = max(int(counts.max()), 1)
        sy = _scaler(0, top, _H - _MB, _MT, False)
        for i, count in enumerate(counts):
            x0, x1 = sx(edges[i]), sx(edges[i + 1])
            y0, y1 = sy(0), sy(count)
            canvas.add(f'<rect x="{x0:.1f}" y="{y1:.1f}" width="{max(x1 - x0 - 1, 0.5):.1f}" '
                       f'height="{max(y0 - y1, 0):.1f}" fill="#1f77b4"/>')
        for t in _ticks(edges[0], edges[-1], False):
            if edges[0] <= t <= edges[-1]:
                px = sx(t)
                canvas.add(f'<text x="{px:.1f}" y="{_H - _MB + 16}" '
                           f'text-anchor="middle">{_fmt(t)}</text>')
        for t in _ticks(0, top, False):
            py = sy(t)
            canvas.add(f'<text x="{_ML - 7}" y="{py + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canvas.render())
