"""SVG line chart of frame scores with ground-truth intervals shaded."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 800, 260
LEFT, RIGHT, TOP, BOTTOM = 50, 15, 30, 35


def render_score_svg(scores, intervals=(), title: str = "") -> str:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no scores to plot")
    F = s.size
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def x(i):
        return LEFT + (0.0 if F == 1 else (i - 1) / (F - 1) * pw)

    def y(v):
        return TOP + (1.0 - min(max(v, 0.0), 1.0)) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    for a, b in intervals or ():
        x0, x1 = x(a), x(b)
        parts.append(
            f'<rect class="gt" x="{x0:.2f}" y="{TOP}" width="{max(x1 - x0, 1.0):.2f}" height="{ph}" '
            'fill="#f4a6a6" fill-opacity="0.5"/>'
        )
    parts.append(f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>')
    parts.append(f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>')
    for tick in (0.0, 0.5, 1.0):
        parts.append(
            f'<text x="{LEFT - 6}" y="{y(tick) + 4:.2f}" font-size="11" text-anchor="end">{tick:.1f}</text>'
        )
    parts.append(f'<text x="{LEFT}" y="{HEIGHT - 10}" font-size="11">1</text>')
    parts.append(f'<text x="{LEFT + pw}" y="{HEIGHT - 10}" font-size="11" text-anchor="end">{F}</text>')
    parts.append(
        f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 10}" font-size="11" text-anchor="middle">frame</text>'
    )
    if title:
        parts.append(f'<text x="{LEFT}" y="18" font-size="13">{escape(title)}</text>')
    points = " ".join(f"{x(i):.2f},{y(v):.4f}" for i, v in enumerate(s, start=1))
    parts.append(f'<polyline fill="none" stroke="#1f5fbf" stroke-width="1.5" points="{points}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_score_svg(path, scores, intervals=(), title: str = "") -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(render_score_svg(scores, intervals, title), encoding="utf-8")
