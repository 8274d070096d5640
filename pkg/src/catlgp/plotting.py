"""Standalone SVG figures: latent scatter plots and density heat maps.

Output is plain SVG 1.1 text with fixed number formatting, so identical input
gives byte-identical files.
"""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .errors import TooManyLabels

MAX_LABELS = 12
# 12 distinguishable colours (Tableau-style)
PALETTE = (
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948",
    "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac", "#1f77b4", "#17becf",
)
DENSITY_COLOR = "#1a9641"

WIDTH, HEIGHT = 560, 480
MARGIN = dict(left=60, right=150, top=40, bottom=50)


def _f(v):
    return f"{v:.2f}"


class _Frame:
    def __init__(self, x_range, y_range):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        self.pw = WIDTH - MARGIN["left"] - MARGIN["right"]
        self.ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(self, x):
        return MARGIN["left"] + (x - self.x0) / (self.x1 - self.x0) * self.pw

    def py(self, y):
        return MARGIN["top"] + (1.0 - (y - self.y0) / (self.y1 - self.y0)) * self.ph


def _padded_range(v):
    lo, hi = float(np.min(v)), float(np.max(v))
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _header(title):
    return [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{escape(title)}</text>',
    ]


def _axes(frame, xlabel, ylabel):
    left, top = MARGIN["left"], MARGIN["top"]
    out = [
        f'<rect x="{left}" y="{top}" width="{frame.pw}" height="{frame.ph}" fill="none" '
        'stroke="#333333" stroke-width="1"/>'
    ]
    for t in np.linspace(frame.x0, frame.x1, 5):
        x = _f(frame.px(t))
        out.append(f'<text x="{x}" y="{top + frame.ph + 16}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{t:.2g}</text>')
    for t in np.linspace(frame.y0, frame.y1, 5):
        y = _f(frame.py(t))
        out.append(f'<text x="{left - 6}" y="{y}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{t:.2g}</text>')
    out.append(f'<text x="{left + frame.pw // 2}" y="{HEIGHT - 12}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + frame.ph // 2}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12" transform="rotate(-90 16 {top + frame.ph // 2})">{escape(ylabel)}</text>')
    return out


def scatter_svg(points, labels=None, title="Latent space", axis_names=("latent 1", "latent 2"),
                background=None) -> str:
    """Scatter of latent means, one ``<circle>`` per row, coloured by label.

    Args:
        points: ``[N, 2]`` coordinates.
        labels: optional per-point strings; at most 12 distinct values.
        background: optional :class:`~catlgp.data_io.DensityGrid` drawn underneath.

    Raises:
        TooManyLabels: more than 12 distinct labels.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    classes = []
    if labels is not None:
        classes = sorted(set(labels), key=lambda s: (len(s), s))
        if len(classes) > MAX_LABELS:
            raise TooManyLabels(
                f"{len(classes)} distinct labels; at most {MAX_LABELS} can be coloured. "
                "Group rare labels or plot without --label-column."
            )
    if background is not None:
        x_range, y_range = background.x_range, background.y_range
    else:
        x_range, y_range = _padded_range(points[:, 0]), _padded_range(points[:, 1])
    frame = _Frame(x_range, y_range)
    out = _header(title)
    if background is not None:
        out += _density_rects(background, frame)
    out += _axes(frame, *axis_names)
    colour = {c: PALETTE[i] for i, c in enumerate(classes)}
    for i, (x, y) in enumerate(points):
        fill = colour[labels[i]] if labels is not None else PALETTE[0]
        out.append(f'<circle cx="{_f(frame.px(x))}" cy="{_f(frame.py(y))}" r="3.5" fill="{fill}" '
                   'fill-opacity="0.85" stroke="#222222" stroke-width="0.4"/>')
    if classes:
        lx = WIDTH - MARGIN["right"] + 14
        for i, c in enumerate(classes):
            y = MARGIN["top"] + 10 + 18 * i
            out.append(f'<rect x="{lx}" y="{y - 8}" width="10" height="10" fill="{colour[c]}"/>')
            out.append(f'<text x="{lx + 16}" y="{y + 1}" font-family="sans-serif" '
                       f'font-size="11">{escape(c)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _density_rects(grid, frame):
    vmax = float(grid.values.max())
    ny, nx = grid.values.shape
    dx = (grid.x_range[1] - grid.x_range[0]) / nx
    dy = (grid.y_range[1] - grid.y_range[0]) / ny
    w = frame.px(grid.x_range[0] + dx) - frame.px(grid.x_range[0])
    h = frame.py(grid.y_range[0]) - frame.py(grid.y_range[0] + dy)
    out = []
    for i in range(ny):
        for j in range(nx):
            a = grid.values[i, j] / vmax if vmax > 0 else 0.0
            x = frame.px(grid.x_range[0] + j * dx)
            y = frame.py(grid.y_range[0] + (i + 1) * dy)
            out.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" '
                       f'fill="{DENSITY_COLOR}" fill-opacity="{a:.4f}"/>')
    return out


def density_svg(grid, title="Density over the latent points") -> str:
    """Heat map with one ``<rect>`` per cell, opacity proportional to density."""
    frame = _Frame(grid.x_range, grid.y_range)
    out = _header(title)
    out += _density_rects(grid, frame)
    out += _axes(frame, f"latent {grid.dims[0] + 1}", f"latent {grid.dims[1] + 1}")
    out.append("</svg>")
    return "\n".join(out) + "\n"
