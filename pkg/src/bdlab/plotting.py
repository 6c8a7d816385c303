"""Self-contained SVG line charts, written by hand so output is byte-stable."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

from .trainer import TrajectoryPoint

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd")

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 40, 50


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(1, count)
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + step * 1e-9:
        if v >= lo - step * 1e-9:
            ticks.append(round(v, 12))
        v += step
    return ticks


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1000 or abs(v) < 1e-3:
        return f"{v:.1e}"
    return f"{v:.4g}"


def line_chart_svg(
    title: str,
    x_label: str,
    y_label: str,
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    y_range: tuple[float, float] | None = None,
) -> str:
    """Render series ``(label, xs, ys)`` as one SVG document; non-finite points break the line."""
    finite = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y)]
    xs_all = [p[0] for p in finite] or [0.0, 1.0]
    ys_all = [p[1] for p in finite] or [0.0, 1.0]
    x_lo, x_hi = min(xs_all), max(xs_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_range is not None:
        y_lo, y_hi = y_range
    else:
        y_lo, y_hi = min(ys_all), max(ys_all)
        pad = 0.05 * (y_hi - y_lo) if y_hi > y_lo else 0.5
        y_lo, y_hi = y_lo - pad, y_hi + pad
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(x):
        return LEFT + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return TOP + (1.0 - (y - y_lo) / (y_hi - y_lo)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{_escape(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333333"/>',
    ]
    for t in nice_ticks(x_lo, x_hi):
        x = sx(t)
        out.append(f'<line x1="{_fmt(x)}" y1="{TOP + ph}" x2="{_fmt(x)}" y2="{TOP + ph + 5}" stroke="#333333"/>')
        out.append(
            f'<text x="{_fmt(x)}" y="{TOP + ph + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{_tick_label(t)}</text>'
        )
    for t in nice_ticks(y_lo, y_hi):
        y = sy(t)
        out.append(f'<line x1="{LEFT - 5}" y1="{_fmt(y)}" x2="{LEFT}" y2="{_fmt(y)}" stroke="#333333"/>')
        out.append(f'<line x1="{LEFT}" y1="{_fmt(y)}" x2="{LEFT + pw}" y2="{_fmt(y)}" stroke="#eeeeee"/>')
        out.append(
            f'<text x="{LEFT - 8}" y="{_fmt(y + 4)}" text-anchor="end" font-family="sans-serif" font-size="11">{_tick_label(t)}</text>'
        )
    out.append(
        f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">{_escape(x_label)}</text>'
    )
    out.append(
        f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">{_escape(y_label)}</text>'
    )
    for i, (label, xs, ys) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        runs, cur = [], []
        for x, y in zip(xs, ys):
            if math.isfinite(x) and math.isfinite(y):
                cur.append(f"{_fmt(sx(x))},{_fmt(sy(min(max(y, y_lo), y_hi)))}")
            elif cur:
                runs.append(cur)
                cur = []
        if cur:
            runs.append(cur)
        for pts in runs:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{" ".join(pts)}"/>')
        ly = TOP + 14 + 18 * i
        out.append(f'<line x1="{LEFT + pw + 12}" y1="{ly}" x2="{LEFT + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(
            f'<text x="{LEFT + pw + 36}" y="{ly + 4}" font-family="sans-serif" font-size="11">{_escape(label)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def trajectory_charts(trajectory: Sequence[TrajectoryPoint], run_name: str = "") -> dict[str, str]:
    """The four per-run charts: cosine, weights, task losses, combined loss."""
    steps = [float(p.step) for p in trajectory]
    prefix = f"{run_name}: " if run_name else ""
    ln2 = [math.log(2.0)] * len(steps)
    return {
        "cosine.svg": line_chart_svg(
            prefix + "gradient cosine", "step", "cos(g_U, g_G)", [("cos", steps, [p.cos_ug for p in trajectory])]
        ),
        "weights.svg": line_chart_svg(
            prefix + "task weights",
            "step",
            "weight",
            [("w_U", steps, [p.w_u for p in trajectory]), ("w_G", steps, [p.w_g for p in trajectory])],
            y_range=(0.0, 1.0),
        ),
        "task_losses.svg": line_chart_svg(
            prefix + "task DPO losses",
            "step",
            "loss (nats)",
            [
                ("L_U", steps, [p.loss_u for p in trajectory]),
                ("L_G", steps, [p.loss_g for p in trajectory]),
                ("ln 2", steps, ln2),
            ],
        ),
        "combined_loss.svg": line_chart_svg(
            prefix + "combined loss",
            "step",
            "loss (nats)",
            [("combined", steps, [p.loss_combined for p in trajectory]), ("ln 2", steps, ln2)],
        ),
    }


def write_trajectory_charts(out_dir: str | Path, trajectory: Sequence[TrajectoryPoint], run_name: str = "") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, svg in trajectory_charts(trajectory, run_name).items():
        p = out_dir / name
        p.write_text(svg, encoding="utf-8", newline="\n")
        paths.append(p)
    return paths
