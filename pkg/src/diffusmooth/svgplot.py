"""Minimal standalone SVG plotting (no plotting-library dependency).

Line plots and coarse heat maps good enough for figure-style exports; all
output is deterministic text.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_W, _H = 640, 420
_ML, _MR, _MT, _MB = 70, 20, 36, 52


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1, 2, 2.5, 5, 10):
        if raw <= mult * mag:
            step = mult * mag
            break
    start = math.ceil(lo / step) * step
    out = []
    t = start
    while t <= hi + 1e-12 * abs(hi):
        out.append(round(t, 12))
        t += step
    return out


def _fmt(v: float) -> str:
    return f"{v:.6g}"


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str,
                 xlim: tuple[float, float], ylim: tuple[float, float]):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
            f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        ]
        self.xlim, self.ylim = xlim, ylim
        self._axes(xlabel, ylabel)

    def x(self, v: float) -> float:
        lo, hi = self.xlim
        return _ML + (v - lo) / (hi - lo) * (_W - _ML - _MR)

    def y(self, v: float) -> float:
        lo, hi = self.ylim
        return _H - _MB - (v - lo) / (hi - lo) * (_H - _MT - _MB)

    def _axes(self, xlabel: str, ylabel: str) -> None:
        p = self.parts
        p.append(f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" '
                 f'height="{_H - _MT - _MB}" fill="none" stroke="#333"/>')
        for t in _ticks(*self.xlim):
            if self.xlim[0] <= t <= self.xlim[1]:
                xx = self.x(t)
                p.append(f'<line x1="{xx:.1f}" y1="{_H - _MB}" x2="{xx:.1f}" '
                         f'y2="{_H - _MB + 5}" stroke="#333"/>')
                p.append(f'<text x="{xx:.1f}" y="{_H - _MB + 18}" '
                         f'text-anchor="middle">{_fmt(t)}</text>')
        for t in _ticks(*self.ylim):
            if self.ylim[0] <= t <= self.ylim[1]:
                yy = self.y(t)
                p.append(f'<line x1="{_ML - 5}" y1="{yy:.1f}" x2="{_ML}" '
                         f'y2="{yy:.1f}" stroke="#333"/>')
                p.append(f'<text x="{_ML - 8}" y="{yy + 4:.1f}" '
                         f'text-anchor="end">{_fmt(t)}</text>')
        p.append(f'<text x="{(_ML + _W - _MR) / 2}" y="{_H - 12}" '
                 f'text-anchor="middle">{xlabel}</text>')
        p.append(f'<text x="16" y="{(_MT + _H - _MB) / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {(_MT + _H - _MB) / 2})">{ylabel}</text>')

    def polyline(self, xs, ys, color: str, dashed: bool = False) -> None:
        pts = " ".join(f"{self.x(float(a)):.2f},{self.y(float(b)):.2f}"
                       for a, b in zip(xs, ys) if np.isfinite(b))
        dash = ' stroke-dasharray="6 4"' if dashed else ""
        self.parts.append(f'<polyline points="{pts}" fill="none" '
                          f'stroke="{color}" stroke-width="1.6"{dash}/>')

    def markers(self, xs, ys, color: str) -> None:
        for a, b in zip(xs, ys):
            self.parts.append(f'<circle cx="{self.x(float(a)):.2f}" '
                              f'cy="{self.y(float(b)):.2f}" r="3" fill="{color}"/>')

    def legend(self, labels_colors: list[tuple[str, str]]) -> None:
        for i, (lab, col) in enumerate(labels_colors):
            yy = _MT + 14 + 16 * i
            self.parts.append(f'<line x1="{_W - _MR - 120}" y1="{yy}" '
                              f'x2="{_W - _MR - 96}" y2="{yy}" stroke="{col}" '
                              f'stroke-width="2"/>')
            self.parts.append(f'<text x="{_W - _MR - 90}" y="{yy + 4}">{lab}</text>')

    def save(self, path) -> None:
        self.parts.append("</svg>")
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(self.parts) + "\n", encoding="utf-8",
                              newline="\n")


def line_plot(path, series, title: str, xlabel: str, ylabel: str,
              markers_for=()) -> None:
    """Plot (x, y, label) triples as colored polylines with a legend."""
    finite = [(np.asarray(x, float), np.asarray(y, float), lab)
              for x, y, lab in series]
    all_x = np.concatenate([x for x, _, _ in finite])
    all_y = np.concatenate([y[np.isfinite(y)] for _, y, _ in finite])
    pad_y = 0.05 * (all_y.max() - all_y.min() + 1e-12)
    cv = _Canvas(title, xlabel, ylabel,
                 (float(all_x.min()), float(all_x.max())),
                 (float(all_y.min() - pad_y), float(all_y.max() + pad_y)))
    legend = []
    for i, (x, y, lab) in enumerate(finite):
        color = _COLORS[i % len(_COLORS)]
        cv.polyline(x, y, color, dashed=(i % 2 == 1))
        if lab in markers_for:
            cv.markers(x, y, color)
        legend.append((lab, color))
    cv.legend(legend)
    cv.save(path)


def heatmap(path, x, times, matrix, title: str, max_cells: int = 120) -> None:
    """Coarse rect-based heat map of matrix[t, x] values."""
    x = np.asarray(x, float)
    times = np.asarray(times, float)
    z = np.asarray(matrix, float)
    sx = max(1, x.size // max_cells)
    st = max(1, times.size // max_cells)
    x_s, t_s, z_s = x[::sx], times[::st], z[::st, ::sx]
    cv = _Canvas(title, "t", "x", (float(t_s.min()), float(t_s.max())),
                 (float(x_s.min()), float(x_s.max())))
    zmax = float(z_s.max()) or 1.0
    w = (_W - _ML - _MR) / max(1, t_s.size - 1)
    h = (_H - _MT - _MB) / max(1, x_s.size - 1)
    for i, t in enumerate(t_s):
        for j, xx in enumerate(x_s):
            q = min(1.0, max(0.0, z_s[i, j] / zmax))
            shade = int(255 * (1.0 - q))
            cv.parts.append(
                f'<rect x="{cv.x(t) - w / 2:.1f}" y="{cv.y(xx) - h / 2:.1f}" '
                f'width="{w:.2f}" height="{h:.2f}" '
                f'fill="rgb(255,{shade},{shade})" stroke="none"/>')
    cv.save(path)
