"""Minimal deterministic SVG line charts arranged as a grid of panels.

Output bytes depend only on the inputs: coordinates are written with fixed
precision and metadata keys are sorted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape, quoteattr

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
PANEL_W, PANEL_H = 220, 160
MARGIN = 36


@dataclass(frozen=True)
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    dashed: bool = False
    color: str | None = None


@dataclass
class Panel:
    title: str
    series: list[Series] = field(default_factory=list)
    y_range: tuple[float, float] | None = None


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _range(panel: Panel) -> tuple[float, float, float, float]:
    xs = [float(v) for s in panel.series for v in s.x if math.isfinite(v)]
    ys = [float(v) for s in panel.series for v in s.y if math.isfinite(v)]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if panel.y_range is not None:
        y0, y1 = panel.y_range
    else:
        y0, y1 = (min(ys + [0.0]), max(ys + [0.0])) if ys else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    return x0, x1, y0, y1


def _panel_svg(panel: Panel, ox: float, oy: float, labels: dict[str, str]) -> list[str]:
    x0, x1, y0, y1 = _range(panel)
    w, h = PANEL_W - 2 * MARGIN, PANEL_H - 2 * MARGIN

    def px(x: float) -> float:
        return ox + MARGIN + (x - x0) / (x1 - x0) * w

    def py(y: float) -> float:
        return oy + MARGIN + h - (y - y0) / (y1 - y0) * h

    out = [
        f'<rect x="{_fmt(ox + MARGIN)}" y="{_fmt(oy + MARGIN)}" width="{_fmt(w)}" height="{_fmt(h)}" '
        'fill="none" stroke="#999"/>',
        f'<text x="{_fmt(ox + PANEL_W / 2)}" y="{_fmt(oy + MARGIN - 8)}" text-anchor="middle" '
        f'font-size="11">{escape(panel.title)}</text>',
    ]
    for v, anchor in ((x0, "start"), (x1, "end")):
        out.append(f'<text x="{_fmt(px(v))}" y="{_fmt(oy + MARGIN + h + 12)}" text-anchor="{anchor}" '
                   f'font-size="9">{v:g}</text>')
    for v in (y0, y1):
        out.append(f'<text x="{_fmt(ox + MARGIN - 3)}" y="{_fmt(py(v) + 3)}" text-anchor="end" '
                   f'font-size="9">{v:.3g}</text>')
    for i, s in enumerate(panel.series):
        color = s.color or labels.setdefault(s.label, PALETTE[len(labels) % len(PALETTE)])
        pts = " ".join(f"{_fmt(px(float(a)))},{_fmt(py(float(b))) }"
                       for a, b in zip(s.x, s.y) if math.isfinite(a) and math.isfinite(b))
        dash = ' stroke-dasharray="4,3"' if s.dashed else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash}>'
                   f"<title>{escape(s.label)}</title></polyline>")
    return out


def render_panels(
    panels: Sequence[Panel],
    ncols: int,
    title: str = "",
    metadata: Mapping[str, object] | None = None,
) -> str:
    """Lay ``panels`` out row-major in ``ncols`` columns and return SVG text."""
    ncols = max(1, ncols)
    nrows = max(1, math.ceil(len(panels) / ncols))
    legend_h = 24
    width, height = ncols * PANEL_W, nrows * PANEL_H + legend_h + 20
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
    ]
    if metadata:
        lines.append("<metadata>")
        for key in sorted(metadata):
            lines.append(f"  <entry key={quoteattr(str(key))}>{escape(str(metadata[key]))}</entry>")
        lines.append("</metadata>")
    lines.append(f'<text x="{width / 2:.2f}" y="14" text-anchor="middle" font-size="13">{escape(title)}</text>')
    labels: dict[str, str] = {}
    for idx, panel in enumerate(panels):
        r, c = divmod(idx, ncols)
        lines.extend(_panel_svg(panel, c * PANEL_W, 20 + r * PANEL_H, labels))
    x = 10.0
    for label, color in labels.items():
        y = height - 10
        lines.append(f'<line x1="{x:.2f}" y1="{y - 4}" x2="{x + 18:.2f}" y2="{y - 4}" stroke="{color}" '
                     'stroke-width="2"/>')
        lines.append(f'<text x="{x + 22:.2f}" y="{y}" font-size="10">{escape(label)}</text>')
        x += 30 + 7 * len(label)
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_svg(path: str | Path, panels: Sequence[Panel], ncols: int, title: str = "",
              metadata: Mapping[str, object] | None = None) -> Path:
    path = Path(path)
    path.write_text(render_panels(panels, ncols, title, metadata), encoding="utf-8")
    return path
