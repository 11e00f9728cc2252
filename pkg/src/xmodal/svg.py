"""Minimal hand-emitted SVG line charts (no plotting dependency).

Each chart is a fixed-size canvas with a plot frame, tick labels, axis
titles and one ``<polyline>`` per curve. Output is deterministic: floats
are formatted with a fixed number of decimals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

WIDTH = 480
HEIGHT = 320
MARGIN = dict(left=56, right=16, top=20, bottom=44)
PALETTE = ("#1f6fb2", "#d65f1e", "#3a8f3a", "#8a4fb0", "#b03a48")


@dataclass
class Curve:
    label: str
    xs: list
    ys: list


@dataclass
class LineChart:
    title: str
    x_label: str
    y_label: str
    curves: list = field(default_factory=list)
    x_range: tuple | None = None
    y_range: tuple | None = None

    def add(self, label: str, xs, ys) -> None:
        if len(xs) != len(ys):
            raise ValueError("curve coordinate lists differ in length")
        self.curves.append(Curve(label, [float(v) for v in xs], [float(v) for v in ys]))


def _span(lo: float, hi: float) -> tuple:
    if hi <= lo:
        pad = max(abs(lo), 1.0) * 0.05
        return lo - pad, lo + pad
    return lo, hi


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render(chart: LineChart) -> str:
    """Serialize a chart to a standalone SVG document string."""
    if not chart.curves:
        raise ValueError("chart has no curves")
    all_x = [v for c in chart.curves for v in c.xs]
    all_y = [v for c in chart.curves for v in c.ys]
    x0, x1 = _span(*(chart.x_range or (min(all_x), max(all_x))))
    y0, y1 = _span(*(chart.y_range or (min(all_y), max(all_y))))

    px0, px1 = MARGIN["left"], WIDTH - MARGIN["right"]
    py0, py1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]

    def sx(v):
        return px0 + (v - x0) / (x1 - x0) * (px1 - px0)

    def sy(v):
        return py0 + (v - y0) / (y1 - y0) * (py1 - py0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{px0}" y="{py1}" width="{px1 - px0}" height="{py0 - py1}" '
        'fill="none" stroke="#444" stroke-width="1"/>',
        f'<text x="{(px0 + px1) / 2:.1f}" y="14" text-anchor="middle" '
        f'font-size="13">{chart.title}</text>',
    ]

    # Ticks: five per axis, value labels at two decimals.
    for k in range(5):
        fx = x0 + (x1 - x0) * k / 4
        fy = y0 + (y1 - y0) * k / 4
        parts.append(f'<line x1="{sx(fx):.1f}" y1="{py0}" x2="{sx(fx):.1f}" '
                     f'y2="{py0 + 4}" stroke="#444"/>')
        parts.append(f'<text x="{sx(fx):.1f}" y="{py0 + 16}" text-anchor="middle" '
                     f'font-size="10">{_fmt(fx)}</text>')
        parts.append(f'<line x1="{px0 - 4}" y1="{sy(fy):.1f}" x2="{px0}" '
                     f'y2="{sy(fy):.1f}" stroke="#444"/>')
        parts.append(f'<text x="{px0 - 6}" y="{sy(fy) + 3:.1f}" text-anchor="end" '
                     f'font-size="10">{_fmt(fy)}</text>')

    parts.append(f'<text x="{(px0 + px1) / 2:.1f}" y="{HEIGHT - 8}" '
                 f'text-anchor="middle" font-size="11">{chart.x_label}</text>')
    parts.append(f'<text x="14" y="{(py0 + py1) / 2:.1f}" text-anchor="middle" '
                 f'font-size="11" transform="rotate(-90 14 {(py0 + py1) / 2:.1f})">'
                 f'{chart.y_label}</text>')

    for i, curve in enumerate(chart.curves):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(curve.xs, curve.ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{pts}"/>')
        parts.append(f'<text x="{px1 - 6}" y="{py1 + 14 + 13 * i}" text-anchor="end" '
                     f'font-size="10" fill="{color}">{curve.label}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write(path: str, chart: LineChart) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render(chart))
