"""Standalone SVG figures for the influence diagnostics.

Every figure is a pure function of its inputs: a fixed 640x480 canvas,
coordinates printed with two decimals, no timestamps or generated ids, so
identical inputs give byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .data import PanelDataset
from .errors import BadTarget, TooFewSubjects
from .influence import DiagnosticRecord, stat_vector
from .simulate import make_rng

WIDTH, HEIGHT = 640, 480
FONT_SIZE = 12
RED = "#D62728"
BLACK = "#000000"

STAT_LABELS = {
    "Ci": "C_i",
    "Ci_b": "C_i_b",
    "Ci_d": "C_i_d",
    "rri": "rr_i",
    "cook1": "one-step Cook distance",
}
PER_ARM = 10


@dataclass(frozen=True)
class PlotSelection:
    mode: Literal["all", "balanced20"] = "all"
    highlight: tuple[int, ...] = ()
    seed: int = 0

    def select(self, records: Sequence[DiagnosticRecord]) -> list[DiagnosticRecord]:
        """Records to draw, ordered by (trt, id).

        ``balanced20`` draws 10 subjects per arm by a seeded shuffle of the
        id-sorted arm; highlighted subjects are always kept.
        """
        ordered = sorted(records, key=lambda r: (r.trt, r.subject_id))
        if self.mode == "all":
            return ordered
        if self.mode != "balanced20":
            raise ValueError(f"unknown selection mode {self.mode!r}")
        rng = make_rng(self.seed)
        chosen: list[DiagnosticRecord] = []
        for arm in (0, 1):
            pool = [r for r in ordered if r.trt == arm]
            if len(pool) < PER_ARM:
                raise TooFewSubjects(f"arm trt={arm} has {len(pool)} subjects, need {PER_ARM}")
            perm = rng.permutation(len(pool))
            pick = [pool[k] for k in perm[:PER_ARM]]
            forced = [r for r in pool if r.subject_id in self.highlight and r not in pick]
            for r in forced:
                for k in range(len(pick) - 1, -1, -1):
                    if pick[k].subject_id not in self.highlight:
                        pick[k] = r
                        break
            chosen.extend(sorted(pick, key=lambda r: r.subject_id))
        return chosen


def _f(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _fmt_tick(v: float) -> str:
    return f"{v:.4g}"


class _Svg:
    def __init__(self, title: str) -> None:
        self.parts = [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" '
            f'font-family="sans-serif" font-size="{FONT_SIZE}">',
            f"<title>{escape(title)}</title>",
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#FFFFFF"/>',
        ]

    def line(self, x1: float, y1: float, x2: float, y2: float, cls: str, color: str = BLACK,
             width: float = 1.0) -> None:
        self.parts.append(
            f'<line class="{cls}" x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" '
            f'stroke="{color}" stroke-width="{_f(width)}"/>'
        )

    def text(self, x: float, y: float, s: str, cls: str = "label", anchor: str = "middle",
             color: str = BLACK, rotate: bool = False) -> None:
        tr = f' transform="rotate(-90 {_f(x)} {_f(y)})"' if rotate else ""
        self.parts.append(
            f'<text class="{cls}" x="{_f(x)}" y="{_f(y)}" text-anchor="{anchor}" '
            f'fill="{color}"{tr}>{escape(s)}</text>'
        )

    def circle(self, x: float, y: float, r: float, cls: str, color: str) -> None:
        self.parts.append(
            f'<circle class="{cls}" cx="{_f(x)}" cy="{_f(y)}" r="{_f(r)}" fill="{color}"/>'
        )

    def polyline(self, pts: Sequence[tuple[float, float]], cls: str, color: str) -> None:
        coords = " ".join(f"{_f(x)},{_f(y)}" for x, y in pts)
        self.parts.append(
            f'<polyline class="{cls}" points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="1.50"/>'
        )

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _axis_range(values: np.ndarray) -> tuple[float, float]:
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return 0.0, 1.0
    lo = min(0.0, float(finite.min()))
    hi = max(0.0, float(finite.max()))
    if hi - lo <= 0:
        return 0.0, 1.0
    pad = 0.05 * (hi - lo)
    return (lo - pad if lo < 0 else lo), hi + pad


class _Frame:
    """Linear map from data to a pixel rectangle (y grows upward in data)."""

    def __init__(self, left: float, top: float, right: float, bottom: float,
                 xr: tuple[float, float], yr: tuple[float, float]) -> None:
        self.left, self.top, self.right, self.bottom = left, top, right, bottom
        self.xr, self.yr = xr, yr

    def x(self, v: float) -> float:
        a, b = self.xr
        return self.left + (v - a) / (b - a) * (self.right - self.left)

    def y(self, v: float) -> float:
        a, b = self.yr
        return self.bottom - (v - a) / (b - a) * (self.bottom - self.top)

    def axes(self, svg: _Svg, xlabel: str, ylabel: str, yticks: Sequence[float] = ()) -> None:
        svg.line(self.left, self.bottom, self.right, self.bottom, "axis")
        svg.line(self.left, self.top, self.left, self.bottom, "axis")
        for t in yticks:
            yy = self.y(t)
            svg.line(self.left - 4, yy, self.left, yy, "tick")
            svg.text(self.left - 6, yy + 4, _fmt_tick(t), cls="tick-label", anchor="end")
        svg.text((self.left + self.right) / 2, self.bottom + 34, xlabel, cls="axis-label")
        svg.text(self.left - 44, (self.top + self.bottom) / 2, ylabel, cls="axis-label",
                 rotate=True)


def _ticks(lo: float, hi: float) -> list[float]:
    return [lo + (hi - lo) * k / 4 for k in range(5)]


def needle_plot(records: Sequence[DiagnosticRecord], stat: str,
                sel: PlotSelection = PlotSelection()) -> str:
    """Per-subject needles of one statistic, faceted by treatment arm."""
    if not records:
        raise ValueError("no records to plot")
    chosen = sel.select(records)
    values = stat_vector(chosen, stat)
    if not np.all(np.isfinite(values)):
        raise ValueError(f"statistic {stat!r} has non-finite values")
    label = STAT_LABELS.get(stat, stat)
    svg = _Svg(f"Needle plot of {label}")
    svg.text(WIDTH / 2, 22, f"Needle plot of {label}", cls="title")
    yr = _axis_range(values)
    facets = [(0, 80.0, 345.0), (1, 375.0, 620.0)]
    for arm, left, right in facets:
        sub = [(r, v) for r, v in zip(chosen, values) if r.trt == arm]
        fr = _Frame(left, 50.0, right, 420.0, (0.0, max(len(sub), 1) + 1.0), yr)
        fr.axes(svg, "subject", label if arm == 0 else "",
                yticks=_ticks(*yr) if arm == 0 else ())
        svg.text((left + right) / 2, 44, f"trt={arm}", cls="facet-label")
        y0 = fr.y(0.0)
        for k, (r, v) in enumerate(sub, start=1):
            color = RED if r.subject_id in sel.highlight else BLACK
            xx = fr.x(k)
            svg.line(xx, y0, xx, fr.y(v), "needle", color=color, width=2.0)
            svg.text(xx, 434, str(r.subject_id), cls="tick-label", color=color)
    return svg.render()


def scatter_plot(records: Sequence[DiagnosticRecord],
                 sel: PlotSelection = PlotSelection()) -> str:
    """C_i_b on x against C_i_d on y, points labelled by subject id."""
    if not records:
        raise ValueError("no records to plot")
    chosen = sel.select(records)
    xs = stat_vector(chosen, "Ci_b")
    ys = stat_vector(chosen, "Ci_d")
    svg = _Svg("Scatter of C_i_b against C_i_d")
    svg.text(WIDTH / 2, 22, "C_i_d against C_i_b", cls="title")
    xr, yr = _axis_range(xs), _axis_range(ys)
    fr = _Frame(80.0, 50.0, 600.0, 420.0, xr, yr)
    fr.axes(svg, "C_i_b", "C_i_d", yticks=_ticks(*yr))
    for t in _ticks(*xr):
        svg.text(fr.x(t), fr.bottom + 16, _fmt_tick(t), cls="tick-label")
    for r, x, y in zip(chosen, xs, ys):
        color = RED if r.subject_id in sel.highlight else BLACK
        svg.circle(fr.x(x), fr.y(y), 3.0, "point", color)
        svg.text(fr.x(x) + 5, fr.y(y) - 5, str(r.subject_id), cls="point-label",
                 anchor="start", color=color)
    return svg.render()


def trajectory_plot(panel: PanelDataset, highlight: int, others: int = 5) -> str:
    """Period counts of one subject (red) and ``others`` seeded picks (black)."""
    ids = [int(i) for i in panel.ids]
    if highlight not in ids:
        raise BadTarget(f"subject {highlight} not in panel")
    pool = [i for i in ids if i != highlight]
    if others > len(pool):
        raise ValueError(f"asked for {others} other subjects, panel has {len(pool)}")
    rng = make_rng(panel.seed or 0)
    picked = sorted(pool[k] for k in rng.permutation(len(pool))[:others])
    rows = {i: panel.y[ids.index(i)] for i in picked + [highlight]}
    n_per = panel.y.shape[1]
    top = float(max(r.max() for r in rows.values()))
    yr = (0.0, top * 1.05 if top > 0 else 1.0)
    svg = _Svg(f"Period counts, subject {highlight} highlighted")
    svg.text(WIDTH / 2, 22, f"Period counts (subject {highlight} in red)", cls="title")
    fr = _Frame(80.0, 50.0, 600.0, 420.0, (0.5, n_per + 0.5), yr)
    fr.axes(svg, "period", "count", yticks=_ticks(*yr))
    for j in range(1, n_per + 1):
        svg.text(fr.x(j), fr.bottom + 16, str(j), cls="tick-label")
    for i in picked + [highlight]:
        color = RED if i == highlight else BLACK
        pts = [(fr.x(j + 1), fr.y(float(v))) for j, v in enumerate(rows[i])]
        svg.polyline(pts, "trajectory", color)
    return svg.render()


def figure_name(dataset: str, stat: str, method: str | int) -> str:
    return f"{dataset}_{stat}_{method}.svg"


def save_svg(doc: str, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(doc, encoding="utf-8")
    return path
