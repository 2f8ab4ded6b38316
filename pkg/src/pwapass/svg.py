"""Static SVG line charts for dissipation gaps (no plotting dependency)."""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = ["line_chart", "write_svg"]

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    out = []
    t = start
    while t <= hi + 1e-12 * abs(step):
        out.append(0.0 if abs(t) < 1e-12 * step else float(t))
        t += step
    return out


def line_chart(series: dict[str, Sequence[float]], title: str = "", xlabel: str = "k",
               ylabel: str = "", width: int = 720, height: int = 360) -> str:
    """SVG text plotting each named series against its index with a zero line.

    Non-finite samples break the line.
    """
    ml, mr, mt, mb = 80, 20, 36, 48
    pw, ph = width - ml - mr, height - mt - mb
    data = {k: np.asarray(v, dtype=float) for k, v in series.items()}
    finite = np.concatenate([v[np.isfinite(v)] for v in data.values()] + [np.zeros(1)])
    ymin, ymax = float(finite.min()), float(finite.max())
    if ymax - ymin < 1e-300:
        ymin, ymax = ymin - 1.0, ymax + 1.0
    pad = 0.05 * (ymax - ymin)
    ymin, ymax = ymin - pad, ymax + pad
    kmax = max((len(v) for v in data.values()), default=1) - 1
    kmax = max(kmax, 1)

    def px(k):
        return ml + pw * k / kmax

    def py(y):
        return mt + ph * (ymax - y) / (ymax - ymin)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
                   f'{_esc(title)}</text>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for t in _ticks(ymin, ymax):
        y = py(t)
        out.append(f'<line x1="{ml - 4}" y1="{y:.2f}" x2="{ml}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{ml - 6}" y="{y + 4:.2f}" text-anchor="end">{t:.3g}</text>')
    for t in _ticks(0, kmax):
        x = px(t)
        out.append(f'<line x1="{x:.2f}" y1="{mt + ph}" x2="{x:.2f}" y2="{mt + ph + 4}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{mt + ph + 18}" text-anchor="middle">{t:g}</text>')
    if ymin < 0 < ymax:
        y0 = py(0.0)
        out.append(f'<line x1="{ml}" y1="{y0:.2f}" x2="{ml + pw}" y2="{y0:.2f}" '
                   f'stroke="gray" stroke-dasharray="6,4"/>')
    for idx, (name, vals) in enumerate(data.items()):
        color = COLORS[idx % len(COLORS)]
        seg = []
        for k, y in enumerate(vals):
            if np.isfinite(y):
                seg.append(f"{px(k):.2f},{py(y):.2f}")
            elif seg:
                out.append(_poly(seg, color))
                seg = []
        if seg:
            out.append(_poly(seg, color))
        ly = mt + 16 + 16 * idx
        out.append(f'<line x1="{ml + pw - 120}" y1="{ly - 4}" x2="{ml + pw - 100}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw - 95}" y="{ly}">{_esc(name)}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">'
               f'{_esc(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{_esc(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _poly(points, color):
    return (f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{" ".join(points)}"/>')


def _esc(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def write_svg(path, series, **kw) -> None:
    with open(path, "w") as fh:
        fh.write(line_chart(series, **kw))
