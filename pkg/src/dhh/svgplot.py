"""Minimal deterministic SVG line charts with shaded min/max bands."""
from __future__ import annotations

import math
from html import escape

PALETTE = ("#2ca02c", "#1f77b4", "#d62728", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")
WIDTH, HEIGHT = 480, 320
MARGIN = dict(left=60, right=140, top=30, bottom=45)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 10))
        v += step
    return ticks


def line_chart(series: dict, title: str, xlabel: str = "number of training points",
               ylabel: str = "log MSE") -> str:
    """``series`` maps a label to a list of ``(x, mean, lo, hi)`` tuples.

    Each series becomes one filled band (lo..hi) and one polyline (mean).
    Infinite band edges are clipped to the plot frame.
    """
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [v for pts in series.values() for p in pts for v in p[1:] if math.isfinite(v)]
    if not xs:
        xs = [0.0, 1.0]
    if not ys:
        ys = [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    y0, y1 = min(ys), max(ys)
    pad = 0.05 * (y1 - y0 or 1.0)
    y0, y1 = y0 - pad, y1 + pad
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        y = min(max(y, y0), y1) if math.isfinite(y) else (y1 if y > 0 else y0)
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
           f'fill="none" stroke="black"/>']
    for t in _nice_ticks(y0, y1):
        out.append(f'<line x1="{MARGIN["left"] - 4}" y1="{_fmt(py(t))}" x2="{MARGIN["left"]}" '
                   f'y2="{_fmt(py(t))}" stroke="black"/>')
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{_fmt(py(t) + 4)}" text-anchor="end">{t:g}</text>')
    for x in sorted(set(xs)):
        out.append(f'<line x1="{_fmt(px(x))}" y1="{MARGIN["top"] + ph}" x2="{_fmt(px(x))}" '
                   f'y2="{MARGIN["top"] + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{_fmt(px(x))}" y="{MARGIN["top"] + ph + 16}" '
                   f'text-anchor="middle">{x:g}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 8}" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (label, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = sorted(pts)
        upper = " ".join(f"{_fmt(px(x))},{_fmt(py(hi))}" for x, _, _, hi in pts)
        lower = " ".join(f"{_fmt(px(x))},{_fmt(py(lo))}" for x, _, lo, _ in reversed(pts))
        out.append(f'<polygon class="band" points="{upper} {lower}" fill="{color}" '
                   f'fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{_fmt(px(x))},{_fmt(py(m))}" for x, m, _, _ in pts)
        out.append(f'<polyline class="mean" points="{line}" fill="none" stroke="{color}" '
                   f'stroke-width="2"/>')
        ly = MARGIN["top"] + 12 + 16 * i
        lx = MARGIN["left"] + pw + 10
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 22}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def report_charts(report: dict) -> dict:
    """One chart per (system, noise level) from a nested sweep report; returns name -> SVG text."""
    charts = {}
    for system, by_sigma in sorted(report["cells"].items()):
        for sigma_key, by_method in sorted(by_sigma.items()):
            series = {}
            for method, by_n in sorted(by_method.items()):
                series[method] = [(float(n), _num(c["mean"]), _num(c["min"]), _num(c["max"]))
                                  for n, c in by_n.items()]
            name = f"{system}_{sigma_key.replace('=', '')}"
            charts[name] = line_chart(series, f"{system} ({sigma_key})")
    return charts


def _num(v) -> float:
    return math.inf if v == "inf" else float(v)
