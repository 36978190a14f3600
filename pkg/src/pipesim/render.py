"""Deterministic Gantt renderings of a simulation timeline (text and SVG)."""

from __future__ import annotations

import math
from typing import Iterable, List, Optional, Tuple
from xml.sax.saxutils import escape

from .schedule import OpKind
from .simulator import COMM, COMPUTE, SimReport, TimelineEntry

FILL = {OpKind.FORWARD: "-", OpKind.BACKWARD: "=", OpKind.RECOMPUTE: "~",
        OpKind.ALL_REDUCE: "%", OpKind.FLUSH_BARRIER: "#"}
COLORS = {
    OpKind.FORWARD: "#6baed6",
    OpKind.BACKWARD: "#74c476",
    OpKind.RECOMPUTE: "#fdae6b",
    OpKind.ALL_REDUCE: "#9e9ac8",
    OpKind.FLUSH_BARRIER: "#d9d9d9",
}
COMM_COLOR = "#bdbdbd"
FORMATS = ("ascii", "svg")


class RenderError(ValueError):
    pass


def _window(report: SimReport, start: Optional[float], end: Optional[float]):
    entries = report.timeline
    if not entries:
        raise RenderError("timeline is empty")
    t0 = 0.0 if start is None else start
    t1 = max(e.end for e in entries) if end is None else end
    if not t1 > t0:
        raise RenderError(f"empty time window [{t0}, {t1}]")
    chosen = [e for e in entries if e.end > t0 and e.start < t1 or
              (e.start == e.end and t0 <= e.start <= t1)]
    if not chosen:
        raise RenderError(f"no operations inside [{t0}, {t1}]")
    return chosen, t0, t1


def _label(e: TimelineEntry) -> str:
    return e.kind.value + ("" if e.microbatch is None else str(e.microbatch))


def render_ascii(report: SimReport, start: float = None, end: float = None,
                 cols_per_unit: Optional[int] = None) -> str:
    """One compute row and one comm row per worker; ``U`` marks weight updates."""
    entries, t0, t1 = _window(report, start, end)
    if cols_per_unit is None:
        shortest = min((e.end - e.start for e in entries
                        if e.lane == COMPUTE and e.end > e.start), default=t1 - t0)
        cols_per_unit = max(1, math.ceil(3 / shortest))
    width = math.ceil((t1 - t0) * cols_per_unit)

    def col(t):
        return min(width, max(0, round((t - t0) * cols_per_unit)))

    workers = sorted({e.worker for e in report.timeline})
    lines = [f"policy={report.policy.value} d={report.config.depth} m={report.config.microbatches} "
             f"window=[{t0:g},{t1:g}] cols/unit={cols_per_unit}"]
    for w in workers:
        rows = {COMPUTE: ["."] * width, COMM: ["."] * width}
        for e in entries:
            if e.worker != w:
                continue
            row = rows[e.lane]
            a, b = col(e.start), col(e.end)
            if e.kind is OpKind.WEIGHT_UPDATE:
                row[min(a, width - 1)] = "U"
                continue
            if b <= a:
                continue
            if e.kind in FILL and e.kind is not OpKind.FLUSH_BARRIER:
                text = _label(e) if e.kind in (OpKind.FORWARD, OpKind.BACKWARD,
                                               OpKind.RECOMPUTE) else ""
                text = (text + FILL[e.kind] * (b - a))[: b - a]
            elif e.kind is OpKind.FLUSH_BARRIER:
                text = "#" * (b - a)
            else:
                text = ":" * (b - a)
            row[a:b] = list(text)
        lines.append(f"w{w:<3}C|{''.join(rows[COMPUTE])}|")
        lines.append(f"w{w:<3}N|{''.join(rows[COMM])}|")
    lines.append("legend: F fwd(-) B bwd(=) R recompute(~) : p2p transfer "
                 "% all-reduce # flush wait U update")
    return "\n".join(lines) + "\n"


def _f(x: float) -> str:
    s = f"{x:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def render_svg(report: SimReport, start: float = None, end: float = None,
               px_per_unit: Optional[float] = None) -> str:
    entries, t0, t1 = _window(report, start, end)
    if px_per_unit is None:
        px_per_unit = 800.0 / (t1 - t0)
    row_h, lane_h, left, top = 44, 10, 70, 24
    workers = sorted({e.worker for e in report.timeline})
    width = left + (t1 - t0) * px_per_unit + 10
    height = top + row_h * len(workers) + 30
    out: List[str] = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
        f'viewBox="0 0 {_f(width)} {_f(height)}" font-family="monospace" font-size="10">',
        f'<text x="4" y="14">{escape(report.policy.value)} d={report.config.depth} '
        f'm={report.config.microbatches}</text>',
    ]

    def x(t):
        return left + (min(max(t, t0), t1) - t0) * px_per_unit

    for i, w in enumerate(workers):
        y = top + i * row_h
        out.append(f'<text x="4" y="{_f(y + 20)}">worker {w + 1}</text>')
        for e in entries:
            if e.worker != w:
                continue
            comp_h = row_h - lane_h - 8
            if e.lane == COMPUTE:
                ry, rh = y, comp_h
            else:
                ry, rh = y + comp_h + 2, lane_h
            mb = "" if e.microbatch is None else str(e.microbatch)
            ver = "" if e.weight_version is None else str(e.weight_version)
            attrs = (f'data-worker="{w}" data-op="{e.kind.value}" data-mb="{mb}" '
                     f'data-version="{ver}" data-start="{_f(e.start)}" data-end="{_f(e.end)}"')
            if e.kind is OpKind.WEIGHT_UPDATE:
                out.append(f'<g {attrs}><line x1="{_f(x(e.start))}" x2="{_f(x(e.start))}" '
                           f'y1="{_f(y)}" y2="{_f(ry + rh)}" stroke="#000" stroke-width="2"/>'
                           f'<title>worker {w + 1} update to v{ver}</title></g>')
                continue
            if e.end <= e.start:
                continue
            color = COLORS.get(e.kind, COMM_COLOR)
            rx, rw = x(e.start), x(e.end) - x(e.start)
            parts = [f'<g {attrs}>',
                     f'<rect x="{_f(rx)}" y="{_f(ry)}" width="{_f(rw)}" height="{_f(rh)}" '
                     f'fill="{color}" stroke="#333" stroke-width="0.5"/>',
                     f'<title>worker {w + 1} {escape(_label(e))}'
                     + (f' v{ver}' if ver else '') + '</title>']
            if e.kind in (OpKind.FORWARD, OpKind.BACKWARD, OpKind.RECOMPUTE):
                parts.append(f'<text x="{_f(rx + rw / 2)}" y="{_f(ry + 13)}" '
                             f'text-anchor="middle">{mb}</text>')
                if ver:
                    parts.append(f'<text class="version" x="{_f(rx + rw / 2)}" '
                                 f'y="{_f(ry + 25)}" text-anchor="middle" '
                                 f'font-size="8">v{ver}</text>')
            parts.append('</g>')
            out.append("".join(parts))
    axis_y = top + row_h * len(workers) + 12
    out.append(f'<text x="{left}" y="{_f(axis_y)}">t={_f(t0)}</text>')
    out.append(f'<text x="{_f(width - 10)}" y="{_f(axis_y)}" text-anchor="end">t={_f(t1)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_timeline(report: SimReport, fmt: str, start: float = None, end: float = None) -> str:
    if fmt == "ascii":
        return render_ascii(report, start, end)
    if fmt == "svg":
        return render_svg(report, start, end)
    raise RenderError(f"unsupported format {fmt!r}; choose from {list(FORMATS)}")


def svg_ops(svg: str) -> Iterable[Tuple[int, str, str, str]]:
    """(worker, op, mb, version) of every op group in an SVG produced here."""
    import re

    pat = re.compile(r'data-worker="(\d+)" data-op="([^"]*)" data-mb="([^"]*)" '
                     r'data-version="([^"]*)"')
    for mt in pat.finditer(svg):
        yield int(mt.group(1)), mt.group(2), mt.group(3), mt.group(4)
