"""Self-contained SVG heatmap for (p, theta^2) sweeps.

Written by hand rather than through a plotting library so that the bytes
depend only on the data: no timestamps, fonts or renderer versions leak in.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .fk import SweepResult

__all__ = ["diverging_color", "render_heatmap", "heatmap_svg"]

_NEG = (33, 102, 172)  # blue end
_MID = (247, 247, 247)
_POS = (178, 24, 43)  # red end


def diverging_color(value: float, lo: float = -4.0, hi: float = 4.0) -> str:
    """Hex colour on a blue-white-red scale centred at 0 and clamped to [lo, hi].

    >>> diverging_color(0.0), diverging_color(-10.0), diverging_color(4.0)
    ('#f7f7f7', '#2166ac', '#b2182b')
    """
    if not lo < hi:
        raise ValueError("colour range must satisfy lo < hi")
    if math.isnan(value):
        return "#808080"
    v = min(max(value, lo), hi)
    if v < 0 and lo < 0:
        t, end = v / lo, _NEG
    elif v > 0 and hi > 0:
        t, end = v / hi, _POS
    else:
        t, end = 0.0, _MID
    rgb = tuple(int(round(m + (e - m) * t)) for m, e in zip(_MID, end))
    return "#%02x%02x%02x" % rgb


def _num(x: float) -> str:
    return format(float(x), ".4g")


def heatmap_svg(sweep: SweepResult, color_range=(-4.0, 4.0), title: str | None = None) -> str:
    lo, hi = map(float, color_range)
    P, T2, V = sweep.p, sweep.theta2, sweep.values
    if V.size == 0:
        raise ValueError("empty sweep")
    nx, ny = T2.size, P.size
    cell = max(12, min(40, 500 // max(nx, ny)))
    left, top = 70, 40 if title else 20
    w, h = nx * cell, ny * cell
    bar_x = left + w + 30
    width = bar_x + 80
    height = top + h + 60
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if title:
        out.append(f'<text x="{left + w / 2:g}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>')
    # p increases upwards, theta^2 to the right
    for i in range(ny):
        y = top + (ny - 1 - i) * cell
        for j in range(nx):
            x = left + j * cell
            val = float(V[i, j])
            out.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{diverging_color(val, lo, hi)}">'
                f"<title>p={_num(P[i])} theta2={_num(T2[j])} value={_num(val)}</title></rect>"
            )
    if nx * ny == 1:
        out.append(f'<text x="{left + cell / 2:g}" y="{top + cell / 2 + 4:g}" text-anchor="middle" '
                   f'font-size="9">{_num(V[0, 0])}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{w}" height="{h}" fill="none" stroke="#000000"/>')
    for j in sorted({0, nx // 2, nx - 1}):
        x = left + (j + 0.5) * cell
        out.append(f'<text x="{x:g}" y="{top + h + 15}" text-anchor="middle">{_num(T2[j])}</text>')
    for i in sorted({0, ny // 2, ny - 1}):
        y = top + (ny - 1 - i + 0.5) * cell + 4
        out.append(f'<text x="{left - 6}" y="{y:g}" text-anchor="end">{_num(P[i])}</text>')
    out.append(f'<text x="{left + w / 2:g}" y="{top + h + 35}" text-anchor="middle">θ²</text>')
    out.append(f'<text x="{left - 45}" y="{top + h / 2:g}" text-anchor="middle" '
               f'transform="rotate(-90 {left - 45} {top + h / 2:g})">p</text>')
    # colour bar: 40 bands from hi (top) to lo (bottom)
    nb = 40
    bh = h / nb
    for k in range(nb):
        v = hi - (k + 0.5) * (hi - lo) / nb
        out.append(f'<rect x="{bar_x}" y="{top + k * bh:.3f}" width="16" height="{bh:.3f}" '
                   f'fill="{diverging_color(v, lo, hi)}"/>')
    out.append(f'<rect x="{bar_x}" y="{top}" width="16" height="{h}" fill="none" stroke="#000000"/>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = hi - frac * (hi - lo)
        y = top + frac * h
        out.append(f'<line x1="{bar_x + 16}" y1="{y:g}" x2="{bar_x + 20}" y2="{y:g}" stroke="#000000"/>')
        out.append(f'<text x="{bar_x + 23}" y="{y + 4:g}">{_num(v)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_heatmap(sweep: SweepResult, path, color_range=(-4.0, 4.0), title: str | None = None) -> Path:
    """Write the sweep as an SVG heatmap; values outside the range get the end colours."""
    path = Path(path)
    path.write_text(heatmap_svg(sweep, color_range, title), encoding="utf-8")
    return path
