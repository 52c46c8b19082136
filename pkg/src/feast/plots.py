"""Dependency-free SVG figures: embedding scatter plots and histograms."""

from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence, Union
from xml.sax.saxutils import escape

import numpy as np

from feast.data_model import Embedding2D
from feast.errors import InputError

COLORS = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#ad494a",
)
WIDTH, HEIGHT = 640, 480
LEGEND_W = 160


def _fmt(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".")


def _write(path, parts: Sequence[str]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(parts) + "\n")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc


def emit_scatter(e: Embedding2D, labels=None, path="scatter.svg", title: Optional[str] = None) -> None:
    """One circle per wine, ascending id order; colored by class when ``labels`` is given."""
    if len(e) == 0:
        raise InputError("cannot plot an empty embedding")
    order = np.argsort(e.ids, kind="stable")
    pts = e.points[order]
    ids = [e.ids[i] for i in order]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    lo, span = lo - 0.05 * span, span * 1.1
    plot_w = WIDTH - (LEGEND_W if labels is not None else 0)

    def sx(x):
        return (x - lo[0]) / span[0] * plot_w

    def sy(y):
        return HEIGHT - (y - lo[1]) / span[1] * HEIGHT

    class_of = {}
    names: tuple = ()
    if labels is not None:
        class_of = {w: int(c) for w, c in zip(labels.ids, labels.labels)}
        names = labels.class_names
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        parts.append(f'<title>{escape(title)}</title>')
    for wid, (x, y) in zip(ids, pts):
        c = class_of.get(wid)
        fill = COLORS[c % len(COLORS)] if c is not None else "#444444"
        parts.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="4" fill="{fill}" '
                     f'data-id="{wid}"/>')
    if labels is not None:
        parts.append(f'<g class="legend" transform="translate({plot_w + 10},10)">')
        for c, name in enumerate(names):
            y = 18 * c
            parts.append(f'<rect x="0" y="{y}" width="12" height="12" fill="{COLORS[c % len(COLORS)]}"/>')
            parts.append(f'<text x="18" y="{y + 10}" font-size="11">{escape(str(name))}</text>')
        parts.append("</g>")
    parts.append("</svg>")
    _write(path, parts)


def sturges_bins(n: int) -> int:
    return int(math.ceil(math.log2(n))) + 1 if n > 1 else 1


def emit_histogram(values: Union[Sequence[float], Mapping[str, int]], path="histogram.svg") -> None:
    """Bar chart of category counts, or of reals binned by Sturges' rule."""
    if isinstance(values, Mapping):
        if not values:
            raise InputError("cannot plot an empty histogram")
        names = [str(k) for k in values]
        counts = np.array([float(v) for v in values.values()])
    else:
        arr = np.asarray(values, dtype=float)
        if arr.size == 0:
            raise InputError("cannot plot an empty histogram")
        counts, edges = np.histogram(arr, bins=sturges_bins(arr.size))
        counts = counts.astype(float)
        names = [f"{_fmt(a)}-{_fmt(b)}" for a, b in zip(edges[:-1], edges[1:])]
    top = counts.max() if counts.max() > 0 else 1.0
    base = HEIGHT - 40
    bar_w = (WIDTH - 20) / len(counts)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    for i, (name, c) in enumerate(zip(names, counts)):
        h = c / top * (base - 20)
        x = 10 + i * bar_w
        parts.append(f'<rect class="bar" x="{_fmt(x)}" y="{_fmt(base - h)}" width="{_fmt(bar_w * 0.9)}" '
                     f'height="{_fmt(h)}" fill="{COLORS[0]}" data-count="{_fmt(c)}"/>')
        parts.append(f'<text x="{_fmt(x + bar_w * 0.45)}" y="{base + 14}" font-size="9" '
                     f'text-anchor="middle">{escape(name)}</text>')
    parts.append("</svg>")
    _write(path, parts)
