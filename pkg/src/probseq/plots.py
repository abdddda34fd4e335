"""Minimal static SVG charts for calibration reports.

Written by hand rather than through a plotting library so that identical
inputs give byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 480, 360
MARGIN = {"left": 60, "right": 20, "top": 36, "bottom": 50}


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    style: str = "points"  # "points" or "line"
    color: str = "#1f77b4"
    label: str = ""


@dataclass
class Chart:
    title: str
    xlabel: str
    ylabel: str
    series: list = field(default_factory=list)
    diagonal: bool = False


def _fmt(v):
    return f"{v:.2f}"


def _limits(values, force_zero=True):
    lo, hi = float(np.min(values)), float(np.max(values))
    if force_zero:
        lo = min(lo, 0.0)
    if hi - lo < 1e-12:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    return lo, hi + pad


def render_svg(chart: Chart) -> str:
    if not chart.series or not any(len(s.x) for s in chart.series):
        raise ValueError("chart has no data")
    xs = np.concatenate([np.asarray(s.x, dtype=float) for s in chart.series])
    ys = np.concatenate([np.asarray(s.y, dtype=float) for s in chart.series])
    x0, x1 = _limits(xs)
    y0, y1 = _limits(ys)
    if chart.diagonal:
        x0 = y0 = min(x0, y0)
        x1 = y1 = max(x1, y1)
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="13">{escape(chart.title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for frac in np.linspace(0, 1, 5):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        out.append(
            f'<text x="{_fmt(px(xv))}" y="{HEIGHT - MARGIN["bottom"] + 16}" text-anchor="middle">{xv:.3g}</text>'
        )
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{_fmt(py(yv) + 4)}" text-anchor="end">{yv:.3g}</text>')
    out.append(
        f'<text x="{MARGIN["left"] + pw / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(chart.xlabel)}</text>'
    )
    out.append(
        f'<text x="16" y="{MARGIN["top"] + ph / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2})">{escape(chart.ylabel)}</text>'
    )
    if chart.diagonal:
        lo, hi = max(x0, y0), min(x1, y1)
        out.append(
            f'<line x1="{_fmt(px(lo))}" y1="{_fmt(py(lo))}" x2="{_fmt(px(hi))}" y2="{_fmt(py(hi))}" '
            'stroke="gray" stroke-dasharray="4 3"/>'
        )
    for s in chart.series:
        coords = [(px(float(a)), py(float(b))) for a, b in zip(s.x, s.y)]
        if s.style == "line":
            pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in coords)
            out.append(f'<polyline points="{pts}" fill="none" stroke="{s.color}" stroke-width="1.5"/>')
        else:
            out.extend(
                f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="2.5" fill="{s.color}" fill-opacity="0.6"/>' for a, b in coords
            )
    legend = [s for s in chart.series if s.label]
    for i, s in enumerate(legend):
        y = MARGIN["top"] + 14 + 14 * i
        out.append(f'<rect x="{MARGIN["left"] + 8}" y="{y - 8}" width="10" height="10" fill="{s.color}"/>')
        out.append(f'<text x="{MARGIN["left"] + 22}" y="{y + 1}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
