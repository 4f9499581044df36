"""Minimal SVG renderer for right-continuous step curves."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = ["step_svg", "write_step_svg"]

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _path(times, values, x0, y0, sx, sy, t_end, start):
    pts = [(0.0, start)]
    prev = start
    for t, v in zip(times, values):
        pts += [(t, prev), (t, v)]
        prev = v
    pts.append((t_end, prev))
    return " ".join(f"{'M' if i == 0 else 'L'}{x0 + sx * t:.2f},{y0 - sy * v:.2f}" for i, (t, v) in enumerate(pts))


def step_svg(curves: Sequence[tuple], title: str = "", xlabel: str = "effective age", ylabel: str = "",
             width: int = 640, height: int = 400) -> str:
    """SVG text for ``(label, times, values, start_value)`` step curves."""
    left, right, top, bottom = 60, 20, 30, 45
    t_max = max([float(np.max(c[1])) for c in curves if len(c[1])] + [1.0])
    v_all = np.concatenate([np.append(np.asarray(c[2], dtype=float), c[3]) for c in curves]) if curves else np.ones(1)
    v_max = max(float(np.max(v_all)), 1e-12)
    pw, ph = width - left - right, height - top - bottom
    sx, sy = pw / (t_max * 1.05), ph / (v_max * 1.05)
    x0, y0 = left, top + ph
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{top}" stroke="black"/>',
    ]
    for k in range(6):
        t = t_max * k / 5
        v = v_max * k / 5
        parts.append(f'<text x="{x0 + sx * t:.1f}" y="{y0 + 15}" font-size="10" text-anchor="middle">{t:.3g}</text>')
        parts.append(f'<text x="{x0 - 5}" y="{y0 - sy * v + 3:.1f}" font-size="10" text-anchor="end">{v:.3g}</text>')
    for i, (label, times, values, start) in enumerate(curves):
        color = _COLORS[i % len(_COLORS)]
        d = _path(np.asarray(times, float), np.asarray(values, float), x0, y0, sx, sy, t_max * 1.05, float(start))
        parts.append(f'<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{x0 + pw - 5}" y="{top + 15 * (i + 1)}" font-size="11" text-anchor="end" fill="{color}">{label}</text>')
    if title:
        parts.append(f'<text x="{width / 2}" y="18" font-size="13" text-anchor="middle">{title}</text>')
    parts.append(f'<text x="{x0 + pw / 2}" y="{height - 8}" font-size="11" text-anchor="middle">{xlabel}</text>')
    if ylabel:
        parts.append(f'<text x="14" y="{top + ph / 2}" font-size="11" text-anchor="middle" transform="rotate(-90 14 {top + ph / 2})">{ylabel}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_step_svg(path, curves, **kw) -> None:
    Path(path).write_text(step_svg(curves, **kw))
