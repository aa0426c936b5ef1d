"""Minimal deterministic SVG plots of the experiment CSVs.

Only SVG primitives are emitted (polyline, circle, rect, line, text) on a
fixed 960x600 viewBox. Numbers are written with fixed precision, so equal
inputs give byte-identical files.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .experiments import SCHEMAS, detect_schema, read_csv

WIDTH, HEIGHT = 960, 600
MARGIN = dict(left=90, right=190, top=50, bottom=70)
PALETTE = ("#1b4f72", "#c0392b", "#1e8449", "#7d3c98", "#d68910", "#17a589", "#566573", "#a04000",
           "#2e86c1", "#cb4335")

DEFAULT_STYLE = {
    "trajectory": dict(x="time", y="w_bar", group=["feature_index"]),
    "critical_time": dict(x="epsilon", y="t_star_measured", group=["objective", "L", "lambda", "rho"]),
    "generative": dict(x="T_or_n", y="rho_hat", group=["feature"]),
    "ratio": dict(x="epsilon", y="ratio_measured", group=["objective", "L"]),
    "diagnostics": dict(x="time", y="loss", group=[]),
    "learning_order": dict(x="rank", y="crossing_time", group=["objective", "run_seed"]),
}
STYLE_KEYS = {"x", "y", "group", "log_x", "log_y", "title", "x_label", "y_label"}


class PlotFormatError(ValueError):
    """The CSV does not match a known schema, or the style is inconsistent with it."""


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    a = abs(v)
    if a >= 1e4 or a < 1e-2:
        return f"{v:.1e}"
    return f"{v:.3g}"


def _ticks(lo, hi, log):
    if log:
        a, b = math.floor(lo), math.ceil(hi)
        step = max(1, math.ceil((b - a) / 8))
        return [e for e in range(a, b + 1, step) if lo - 1e-9 <= e <= hi + 1e-9]
    return [lo + (hi - lo) * k / 5 for k in range(6)]


class _Canvas:
    def __init__(self):
        self.parts: list[str] = []

    def add(self, s: str):
        self.parts.append(s)

    def text(self, x, y, s, size=14, anchor="middle", rotate=None):
        rot = f' transform="rotate({rotate} {_fmt(x)} {_fmt(y)})"' if rotate is not None else ""
        self.add(f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" font-family="sans-serif" '
                 f'text-anchor="{anchor}"{rot}>{escape(str(s))}</text>')

    def svg(self) -> str:
        head = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
                f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
                f'viewBox="0 0 {WIDTH} {HEIGHT}">\n'
                f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>\n')
        return head + "\n".join(self.parts) + "\n</svg>\n"


def _load(paths: Sequence[str | Path]):
    schema = None
    rows = []
    for path in paths:
        header, data = read_csv(path)
        s = detect_schema(header)
        if s is None:
            raise PlotFormatError(f"{path}: header {header} matches no known schema")
        if schema is not None and s != schema:
            raise PlotFormatError(f"{path}: schema {s!r} differs from {schema!r}")
        schema = s
        rows.extend(data)
    if schema is None:
        raise PlotFormatError("no CSV given")
    return schema, rows


def _num(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        return float("nan")


def line_plot(schema: str, rows: list[dict], style: dict) -> str:
    st = {**DEFAULT_STYLE[schema], **style}
    cols = SCHEMAS[schema]
    for key in ("x", "y"):
        if st[key] not in cols:
            raise PlotFormatError(f"column {st[key]!r} not in schema {schema!r}")
    group = list(st.get("group") or [])
    for g in group:
        if g not in cols:
            raise PlotFormatError(f"group column {g!r} not in schema {schema!r}")
    log_x, log_y = bool(st.get("log_x")), bool(st.get("log_y"))

    series: dict[tuple, list[tuple[float, float]]] = {}
    for r in rows:
        x, y = _num(r[st["x"]]), _num(r[st["y"]])
        if not (math.isfinite(x) and math.isfinite(y)):
            continue
        if (log_x and x <= 0) or (log_y and y <= 0):
            continue
        key = tuple(r[g] for g in group)
        series.setdefault(key, []).append((math.log10(x) if log_x else x, math.log10(y) if log_y else y))

    c = _Canvas()
    c.text(WIDTH / 2, 30, st.get("title", ""), size=18)
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    c.add(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="#000000"/>')
    c.text((x0 + x1) / 2, HEIGHT - 20, st.get("x_label", st["x"]) + (" (log)" if log_x else ""))
    c.text(25, (y0 + y1) / 2, st.get("y_label", st["y"]) + (" (log)" if log_y else ""), rotate=-90)
    pts = [p for s in series.values() for p in s]
    if not pts:
        c.text((x0 + x1) / 2, (y0 + y1) / 2, "no data")
        return c.svg()
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    xlo, xhi = min(xs), max(xs)
    ylo, yhi = min(ys), max(ys)
    if xhi == xlo:
        xlo, xhi = xlo - 0.5, xhi + 0.5
    if yhi == ylo:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    pad = 0.04 * (yhi - ylo)
    ylo, yhi = ylo - pad, yhi + pad

    def sx(v):
        return x0 + (v - xlo) / (xhi - xlo) * (x1 - x0)

    def sy(v):
        return y0 - (v - ylo) / (yhi - ylo) * (y0 - y1)

    for t in _ticks(xlo, xhi, log_x):
        c.add(f'<line x1="{_fmt(sx(t))}" y1="{y0}" x2="{_fmt(sx(t))}" y2="{y0 + 6}" stroke="#000000"/>')
        c.text(sx(t), y0 + 22, _tick_label(10 ** t if log_x else t), size=12)
    for t in _ticks(ylo, yhi, log_y):
        c.add(f'<line x1="{x0 - 6}" y1="{_fmt(sy(t))}" x2="{x0}" y2="{_fmt(sy(t))}" stroke="#000000"/>')
        c.text(x0 - 10, sy(t) + 4, _tick_label(10 ** t if log_y else t), size=12, anchor="end")

    for k, (key, s) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        s = sorted(s)
        if len(s) == 1:
            x, y = s[0]
            c.add(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="4" fill="{color}"/>')
        else:
            coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in s)
            c.add(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if group and k < 24:
            ly = y1 + 10 + 20 * k
            c.add(f'<rect x="{x1 + 15}" y="{ly}" width="14" height="10" fill="{color}"/>')
            label = ", ".join(f"{g}={v}" for g, v in zip(group, key))
            c.text(x1 + 35, ly + 10, label, size=11, anchor="start")
    return c.svg()


def heatmap_plot(rows: list[dict], style: dict) -> str:
    cells = [(int(r["row"]), int(r["col"]), _num(r["value"])) for r in rows]
    c = _Canvas()
    c.text(WIDTH / 2, 30, style.get("title", ""), size=18)
    if not cells:
        c.text(WIDTH / 2, HEIGHT / 2, "no data")
        return c.svg()
    nr = max(i for i, _, _ in cells) + 1
    nc = max(j for _, j, _ in cells) + 1
    vmax = max((abs(v) for _, _, v in cells if math.isfinite(v)), default=0.0) or 1.0
    side = min((WIDTH - 200) / nc, (HEIGHT - 100) / nr)
    ox = (WIDTH - side * nc) / 2
    oy = 50 + (HEIGHT - 100 - side * nr) / 2
    for i, j, v in cells:
        level = min(1.0, abs(v) / vmax) if math.isfinite(v) else 0.0
        g = int(round(255 * (1.0 - level)))
        c.add(f'<rect x="{_fmt(ox + j * side)}" y="{_fmt(oy + i * side)}" width="{_fmt(side)}" '
              f'height="{_fmt(side)}" fill="rgb({g},{g},{g})"/>')
    c.text(WIDTH - 60, HEIGHT - 20, f"max {_tick_label(vmax)}", size=12)
    return c.svg()


def plot_csvs(paths: Sequence[str | Path], style: dict | None = None) -> str:
    """SVG text for one or more CSVs sharing a schema."""
    style = dict(style or {})
    unknown = set(style) - STYLE_KEYS
    if unknown:
        raise PlotFormatError(f"unknown style keys {sorted(unknown)}")
    schema, rows = _load(paths)
    if schema == "heatmap":
        return heatmap_plot(rows, style)
    return line_plot(schema, rows, style)


def emit_plot(csv_path: str | Path | Sequence[str | Path], style: dict | None = None,
              out_path: str | Path | None = None) -> Path:
    """Render ``csv_path`` (or several paths) to ``out_path`` (default: same stem, .svg)."""
    paths = [csv_path] if isinstance(csv_path, (str, Path)) else list(csv_path)
    text = plot_csvs(paths, style)
    out = Path(out_path) if out_path is not None else Path(paths[0]).with_suffix(".svg")
    out.write_text(text, encoding="utf-8", newline="")
    return out
