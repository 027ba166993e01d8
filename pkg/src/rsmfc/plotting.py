"""Deterministic line plots as self-contained SVG on a fixed 800x500 canvas.

Written by hand rather than through a plotting library so the output bytes
depend only on the data: coordinates are rounded to 0.01 px and nothing
(timestamps, ids, font metrics) varies between runs.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import InvalidArgumentError
from .grid_rng import ScalarPath

WIDTH, HEIGHT = 800, 500
LEFT, RIGHT, TOP, BOTTOM = 80, 170, 40, 60
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _xy(series):
    if isinstance(series, ScalarPath):
        t, v = series.finite_part()
        return t, v, series.blew_up
    x, y = (np.asarray(a, dtype=np.float64) for a in series)
    ok = np.isfinite(y) & np.isfinite(x)
    bad = np.flatnonzero(~ok)
    stop = x.size if bad.size == 0 else int(bad[0])
    return x[:stop], y[:stop], bad.size > 0


def _nice_ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    span = hi - lo
    step = 10 ** math.floor(math.log10(span / n))
    for mult in (1, 2, 2.5, 5, 10):
        if span / (step * mult) <= n:
            step *= mult
            break
    start = math.ceil(lo / step - 1e-9) * step
    return np.arange(start, hi + step * 1e-9, step)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit_plot(series: Mapping, path, *, title: str = "", xlabel: str = "t",
              ylabel: str = "") -> Path:
    """Draw each named series as a polyline and write the SVG to ``path``.

    A series is a :class:`ScalarPath` or an ``(x, y)`` pair. Values from the
    first non-finite entry on are dropped, and a truncated series gets a
    cross at its last finite point.
    """
    if not series:
        raise InvalidArgumentError("nothing to plot: the series set is empty")
    data = [(str(name), *_xy(s)) for name, s in series.items()]
    xs = np.concatenate([d[1] for d in data])
    ys = np.concatenate([d[2] for d in data])
    if xs.size == 0:
        raise InvalidArgumentError("nothing to plot: every series is empty")
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 - y0 <= 1e-12 * max(1.0, abs(y0)):
        pad = max(abs(y0) * 0.05, 0.5)
        y0, y1 = y0 - pad, y1 + pad
    else:
        pad = 0.05 * (y1 - y0)
        y0, y1 = y0 - pad, y1 + pad
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + (y1 - y) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for tx in _nice_ticks(x0, x1):
        X = _fmt(px(tx))
        out.append(f'<line x1="{X}" y1="{TOP + ph}" x2="{X}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{X}" y="{TOP + ph + 18}" text-anchor="middle">{tx:.4g}</text>')
    for ty in _nice_ticks(y0, y1):
        Y = _fmt(py(ty))
        out.append(f'<line x1="{LEFT - 5}" y1="{Y}" x2="{LEFT}" y2="{Y}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{Y}" text-anchor="end" dominant-baseline="middle">'
                   f'{ty:.6g}</text>')
    if title:
        out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{TOP - 14}" text-anchor="middle" '
                   f'font-size="15">{_esc(title)}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 15}" text-anchor="middle">'
               f'{_esc(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="18" y="{TOP + ph / 2:.2f}" text-anchor="middle" '
                   f'transform="rotate(-90 18 {TOP + ph / 2:.2f})">{_esc(ylabel)}</text>')

    for j, (name, x, y, truncated) in enumerate(data):
        color = COLORS[j % len(COLORS)]
        if x.size:
            pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(x, y))
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.2"/>')
        if truncated and x.size:
            X, Y = px(x[-1]), py(y[-1])
            out.append(f'<path d="M{_fmt(X - 6)},{_fmt(Y - 6)}L{_fmt(X + 6)},{_fmt(Y + 6)}'
                       f'M{_fmt(X - 6)},{_fmt(Y + 6)}L{_fmt(X + 6)},{_fmt(Y - 6)}" '
                       f'stroke="black" stroke-width="2" class="blow-up"/>')
        ly = TOP + 10 + 18 * j
        lx = WIDTH - RIGHT + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        label = name + (" (blow-up)" if truncated else "")
        out.append(f'<text x="{lx + 26}" y="{ly}" dominant-baseline="middle">{_esc(label)}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    return path
