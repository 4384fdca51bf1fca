"""Minimal line-plot SVG writer for the toolkit's CSV reports."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import ParameterError, PersistenceError, StructuralError

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 130, 30, 50
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def read_csv_rows(path) -> tuple[list[str], list[dict]]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            columns = list(reader.fieldnames or [])
    except OSError as exc:
        raise PersistenceError(f"cannot read {path}: {exc}") from exc
    return columns, rows


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-12 * abs(hi):
        ticks.append(round(v, 12))
        v += step
    return ticks


def _fmt_tick(v: float) -> str:
    return f"{v:.6g}"


def line_plot_svg(series: dict[str, list[tuple[float, float]]], x_label: str, y_label: str) -> str:
    """Render series (name -> [(x, y), ...]) as an SVG document string."""
    points = [p for pts in series.values() for p in pts]
    if not points:
        raise StructuralError("nothing to plot")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def sx(x):
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return MARGIN_T + ph - (y - y_lo) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
    ]
    for t in _nice_ticks(x_lo, x_hi):
        x = sx(t)
        out.append(f'<line x1="{x:.2f}" y1="{MARGIN_T + ph}" x2="{x:.2f}" y2="{MARGIN_T + ph + 4}" stroke="#000"/>')
        out.append(f'<text x="{x:.2f}" y="{MARGIN_T + ph + 16}" text-anchor="middle">{_fmt_tick(t)}</text>')
    for t in _nice_ticks(y_lo, y_hi):
        y = sy(t)
        out.append(f'<line x1="{MARGIN_L - 4}" y1="{y:.2f}" x2="{MARGIN_L}" y2="{y:.2f}" stroke="#000"/>')
        out.append(f'<text x="{MARGIN_L - 6}" y="{y + 4:.2f}" text-anchor="end">{_fmt_tick(t)}</text>')
    out.append(f'<text x="{MARGIN_L + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="16" y="{MARGIN_T + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN_T + ph / 2:.1f})">{escape(y_label)}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in sorted(pts))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}">'
                   f'<title>{escape(name)}</title></polyline>')
        ly = MARGIN_T + 12 + 16 * i
        lx = WIDTH - MARGIN_R + 10
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 22}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _number(value: str, column: str, line: int) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ParameterError(f"column {column!r}, row {line}: {value!r} is not numeric") from None
    if not math.isfinite(v):
        raise ParameterError(f"column {column!r}, row {line}: non-finite value")
    return v


def series_from_rows(rows: list[dict], columns: list[str], x: str, y: str, by: str | None = None,
                     where: dict[str, str] | None = None) -> dict[str, list[tuple[float, float]]]:
    """Group CSV rows into plot series; rows failing a ``where`` equality are skipped."""
    needed = [x, y] + ([by] if by else []) + list(where or {})
    missing = [c for c in needed if c not in columns]
    if missing:
        raise ParameterError(f"unknown column(s) {missing}; available: {columns}")
    series: dict[str, list[tuple[float, float]]] = {}
    for line, row in enumerate(rows, start=2):
        if where and any(not _matches(row[c], v) for c, v in where.items()):
            continue
        name = row[by] if by else y
        series.setdefault(name, []).append((_number(row[x], x, line), _number(row[y], y, line)))
    return series


def _matches(cell: str, wanted: str) -> bool:
    if cell == wanted:
        return True
    try:
        return float(cell) == float(wanted)
    except ValueError:
        return False
