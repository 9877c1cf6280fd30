"""Learning-curve SVGs written by hand (no plotting dependency)."""

from __future__ import annotations

import csv
import math
import os
import re
from collections import OrderedDict
from typing import Dict, List, Sequence, Tuple
from xml.sax.saxutils import escape

from ..errors import ParseError

__all__ = ["read_curves", "render_svg", "plot"]

Y_COLUMNS = ("mean", "nll_holdout", "nll_batch_post")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 160, 20, 50


def _series_name(path: str) -> str:
    stem = os.path.splitext(os.path.basename(path))[0]
    return re.sub(r"_r\d+$", "", stem)


def read_curves(path: str) -> "OrderedDict[str, List[Tuple[float, float]]]":
    """Series from one CSV: ``t`` against the first available y column.

    A ``method`` column splits the rows into several series; otherwise the
    file name (minus any ``_rNN`` repeat suffix) names the single series.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = rows[0]
    if "t" not in header:
        raise ParseError(f"{path}: line 1: no 't' column")
    ycol = next((c for c in Y_COLUMNS if c in header), None)
    if ycol is None:
        raise ParseError(f"{path}: line 1: none of the columns {', '.join(Y_COLUMNS)}")
    it, iy = header.index("t"), header.index(ycol)
    im = header.index("method") if "method" in header else None
    series: "OrderedDict[str, List[Tuple[float, float]]]" = OrderedDict()
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}: line {line}: expected {len(header)} fields, found {len(row)}")
        try:
            t = float(row[it])
            y = float(row[iy]) if row[iy] != "" else math.nan
        except ValueError:
            raise ParseError(f"{path}: line {line}: non-numeric value") from None
        name = row[im] if im is not None else _series_name(path)
        if not math.isnan(y):
            series.setdefault(name, []).append((t, y))
    if not series:
        raise ParseError(f"{path}: no data rows")
    return series


def _ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    first = math.ceil(lo / step) * step
    return [first + i * step for i in range(int((hi - first) / step + 1e-9) + 1)]


def _label(v: float) -> str:
    return f"{v:.6g}"


def render_svg(series: Dict[str, Sequence[Tuple[float, float]]], title: str = "", ylabel: str = "nll") -> str:
    pts = [p for s in series.values() for p in s]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        pad = abs(y0) * 0.05 or 1.0
        y0, y1 = y0 - pad, y1 + pad
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def sx(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return TOP + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for tx in _ticks(x0, x1):
        out.append(f'<text x="{sx(tx):.2f}" y="{H - BOTTOM + 18}" font-size="11" text-anchor="middle">{_label(tx)}</text>')
    for ty in _ticks(y0, y1):
        out.append(f'<text x="{LEFT - 6}" y="{sy(ty) + 4:.2f}" font-size="11" text-anchor="end">{_label(ty)}</text>')
    out.append(f'<text x="{LEFT + pw / 2}" y="{H - 10}" font-size="12" text-anchor="middle">iteration</text>')
    out.append(
        f'<text x="16" y="{TOP + ph / 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 16 {TOP + ph / 2})">{escape(ylabel)}</text>'
    )
    if title:
        out.append(f'<text x="{LEFT + pw / 2}" y="14" font-size="13" text-anchor="middle">{escape(title)}</text>')
    out.append('<g class="series">')
    for i, (name, s) in enumerate(series.items()):
        colour = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in sorted(s))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{coords}"/>')
    out.append("</g>")
    out.append('<g class="legend">')
    for i, name in enumerate(series):
        y = TOP + 14 + 18 * i
        colour = PALETTE[i % len(PALETTE)]
        out.append(f'<line x1="{W - RIGHT + 12}" y1="{y}" x2="{W - RIGHT + 32}" y2="{y}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{W - RIGHT + 38}" y="{y + 4}" font-size="11">{escape(name)}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot(paths: Sequence[str], out_path: str, title: str = "") -> str:
    """Read every CSV, then write one SVG; nothing is written on a parse error."""
    if not paths:
        raise ValueError("no input files")
    pooled: "OrderedDict[str, Dict[float, List[float]]]" = OrderedDict()
    for p in paths:
        for name, pts in read_curves(p).items():
            by_t = pooled.setdefault(name, {})
            for t, y in pts:
                by_t.setdefault(t, []).append(y)
    # repeats of one method collapse to their mean curve
    merged = OrderedDict((name, [(t, sum(ys) / len(ys)) for t, ys in by_t.items()]) for name, by_t in pooled.items())
    svg = render_svg(merged, title=title)
    with open(out_path, "w") as fh:
        fh.write(svg)
    return out_path
