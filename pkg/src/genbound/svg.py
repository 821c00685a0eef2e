"""Minimal deterministic SVG line charts for trace columns.

Output bytes depend only on the input data: fixed palette, fixed float
formatting, no timestamps.
"""

from __future__ import annotations

from typing import Sequence

_PALETTE = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#17becf", "#7f7f7f", "#bcbd22", "#e377c2",
]

_WIDTH, _HEIGHT = 840, 520
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 70, 20, 20, 45


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def render_line_chart(
    series: dict[str, tuple[Sequence[float], Sequence[float]]],
    x_label: str = "",
    y_label: str = "",
) -> str:
    """Render one polyline per named series on shared linear axes."""
    all_x = [x for xs, _ in series.values() for x in xs]
    all_y = [y for _, ys in series.values() for y in ys]
    if not all_x:
        raise ValueError("nothing to plot")
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B

    def sx(x: float) -> float:
        return _MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y: float) -> float:
        return _MARGIN_T + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<line x1="{_MARGIN_L}" y1="{_MARGIN_T + plot_h}" x2="{_MARGIN_L + plot_w}" '
        f'y2="{_MARGIN_T + plot_h}" stroke="black"/>',
        f'<line x1="{_MARGIN_L}" y1="{_MARGIN_T}" x2="{_MARGIN_L}" '
        f'y2="{_MARGIN_T + plot_h}" stroke="black"/>',
    ]
    for t in _ticks(x_lo, x_hi):
        px = sx(t)
        parts.append(
            f'<text x="{_fmt(px)}" y="{_HEIGHT - _MARGIN_B + 18}" font-size="11" '
            f'text-anchor="middle" font-family="monospace">{_fmt(t)}</text>'
        )
    for t in _ticks(y_lo, y_hi):
        py = sy(t)
        parts.append(
            f'<text x="{_MARGIN_L - 6}" y="{_fmt(py + 4)}" font-size="11" '
            f'text-anchor="end" font-family="monospace">{_fmt(t)}</text>'
        )
    if x_label:
        parts.append(
            f'<text x="{_MARGIN_L + plot_w / 2}" y="{_HEIGHT - 8}" font-size="12" '
            f'text-anchor="middle" font-family="monospace">{x_label}</text>'
        )
    if y_label:
        parts.append(
            f'<text x="14" y="{_MARGIN_T + plot_h / 2}" font-size="12" text-anchor="middle" '
            f'font-family="monospace" transform="rotate(-90 14 {_MARGIN_T + plot_h / 2})">'
            f"{y_label}</text>"
        )
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>'
        )
        parts.append(
            f'<text x="{_MARGIN_L + plot_w - 6}" y="{_MARGIN_T + 16 + 16 * i}" font-size="12" '
            f'text-anchor="end" fill="{color}" font-family="monospace">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
