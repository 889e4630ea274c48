"""Tiny dependency-free SVG charts: a line chart and a grouped bar chart.

These render the two standard figures of a pruning run — loss per removal
step and per-stage eval accuracy — as standalone SVG files. Deliberately
minimal: axes, ticks, legend, nothing interactive.
"""

from __future__ import annotations

WIDTH, HEIGHT = 640, 400
M_LEFT, M_RIGHT, M_TOP, M_BOT = 64, 24, 36, 48
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="monospace" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{(M_LEFT + WIDTH - M_RIGHT) / 2}" y="{HEIGHT - 10}" '
        f'text-anchor="middle">{xlabel}</text>',
        f'<text x="16" y="{(M_TOP + HEIGHT - M_BOT) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(M_TOP + HEIGHT - M_BOT) / 2})">{ylabel}</text>',
        f'<line x1="{M_LEFT}" y1="{HEIGHT - M_BOT}" x2="{WIDTH - M_RIGHT}" '
        f'y2="{HEIGHT - M_BOT}" stroke="black"/>',
        f'<line x1="{M_LEFT}" y1="{M_TOP}" x2="{M_LEFT}" y2="{HEIGHT - M_BOT}" stroke="black"/>',
    ]
    return parts


def _legend(labels: list[str]) -> list[str]:
    parts = []
    for i, label in enumerate(labels):
        y = M_TOP + 8 + 16 * i
        color = PALETTE[i % len(PALETTE)]
        parts.append(
            f'<rect x="{WIDTH - M_RIGHT - 150}" y="{y - 9}" width="10" height="10" fill="{color}"/>'
        )
        parts.append(f'<text x="{WIDTH - M_RIGHT - 135}" y="{y}">{label}</text>')
    return parts


def line_chart(
    series: dict[str, list[tuple[float, float]]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
) -> str:
    """SVG line chart; ``series`` maps legend label to (x, y) points."""
    points = [p for pts in series.values() for p in pts]
    if not points:
        raise ValueError("line_chart needs at least one point")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    xlo, xhi = min(xs), max(xs)
    ylo, yhi = min(ys), max(ys)
    if xhi == xlo:
        xhi = xlo + 1.0
    if yhi == ylo:
        yhi = ylo + 1.0
    pad = 0.05 * (yhi - ylo)
    ylo, yhi = ylo - pad, yhi + pad

    def px(x):
        return M_LEFT + (x - xlo) / (xhi - xlo) * (WIDTH - M_LEFT - M_RIGHT)

    def py(y):
        return HEIGHT - M_BOT - (y - ylo) / (yhi - ylo) * (HEIGHT - M_TOP - M_BOT)

    parts = _frame(title, xlabel, ylabel)
    for tx in _ticks(xlo, xhi):
        parts.append(
            f'<line x1="{_fmt(px(tx))}" y1="{HEIGHT - M_BOT}" x2="{_fmt(px(tx))}" '
            f'y2="{HEIGHT - M_BOT + 4}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{_fmt(px(tx))}" y="{HEIGHT - M_BOT + 18}" '
            f'text-anchor="middle">{_fmt(tx)}</text>'
        )
    for ty in _ticks(ylo, yhi):
        parts.append(
            f'<line x1="{M_LEFT - 4}" y1="{_fmt(py(ty))}" x2="{M_LEFT}" '
            f'y2="{_fmt(py(ty))}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{M_LEFT - 8}" y="{_fmt(py(ty) + 4)}" text-anchor="end">{_fmt(ty)}</text>'
        )
    for i, (label, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="3" fill="{color}"/>')
    parts.extend(_legend(list(series)))
    parts.append("</svg>")
    return "\n".join(parts)


def bar_chart(
    groups: list[str],
    series: dict[str, list[float]],
    title: str = "",
    ylabel: str = "",
) -> str:
    """Grouped SVG bar chart; each series must have one value per group."""
    if not groups or not series:
        raise ValueError("bar_chart needs groups and at least one series")
    for label, vals in series.items():
        if len(vals) != len(groups):
            raise ValueError(f"series {label!r} has {len(vals)} values for {len(groups)} groups")
    allvals = [v for vals in series.values() for v in vals]
    ylo = min(0.0, min(allvals))
    yhi = max(allvals)
    if yhi == ylo:
        yhi = ylo + 1.0

    def py(y):
        return HEIGHT - M_BOT - (y - ylo) / (yhi - ylo) * (HEIGHT - M_TOP - M_BOT)

    parts = _frame(title, "", ylabel)
    for ty in _ticks(ylo, yhi):
        parts.append(
            f'<text x="{M_LEFT - 8}" y="{_fmt(py(ty) + 4)}" text-anchor="end">{_fmt(ty)}</text>'
        )
    span = WIDTH - M_LEFT - M_RIGHT
    slot = span / len(groups)
    nbar = len(series)
    bw = slot * 0.8 / nbar
    for gi, group in enumerate(groups):
        gx = M_LEFT + gi * slot
        parts.append(
            f'<text x="{_fmt(gx + slot / 2)}" y="{HEIGHT - M_BOT + 18}" '
            f'text-anchor="middle">{group}</text>'
        )
        for si, (label, vals) in enumerate(series.items()):
            v = vals[gi]
            x = gx + slot * 0.1 + si * bw
            top = py(max(v, 0.0))
            h = abs(py(v) - py(0.0))
            parts.append(
                f'<rect x="{_fmt(x)}" y="{_fmt(top)}" width="{_fmt(bw)}" '
                f'height="{_fmt(h)}" fill="{PALETTE[si % len(PALETTE)]}"/>'
            )
    parts.extend(_legend(list(series)))
    parts.append("</svg>")
    return "\n".join(parts)


def save_chart(path, svg: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(svg + "\n")
