"""Minimal deterministic SVG line and scatter plots (no plotting dependency)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")
W, H, PAD = 480, 320, 48


def _fmt(x: float) -> str:
    return f"{x:.2f}"


class _Axes:
    def __init__(self, xs: np.ndarray, ys: np.ndarray):
        self.x0, self.x1 = self._span(xs)
        self.y0, self.y1 = self._span(ys)

    @staticmethod
    def _span(v: np.ndarray) -> tuple[float, float]:
        v = v[np.isfinite(v)]
        if len(v) == 0:
            return 0.0, 1.0
        lo, hi = float(v.min()), float(v.max())
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        return lo, hi

    def px(self, x: float) -> float:
        return PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2 * PAD)

    def py(self, y: float) -> float:
        return H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2 * PAD)

    def frame(self, title: str, xlabel: str, ylabel: str) -> list[str]:
        out = [
            f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="#333"/>',
            f'<text x="{W / 2}" y="{PAD / 2}" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
            f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
        ]
        for v, anchor in ((self.x0, "start"), (self.x1, "end")):
            out.append(f'<text x="{_fmt(self.px(v))}" y="{H - PAD + 14}" text-anchor="{anchor}" '
                       f'font-size="10">{v:.3g}</text>')
        for v in (self.y0, self.y1):
            out.append(f'<text x="{PAD - 4}" y="{_fmt(self.py(v) + 3)}" text-anchor="end" '
                       f'font-size="10">{v:.3g}</text>')
        return out


def _document(body: list[str]) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">'
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>"]) + "\n"


def line_plot(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
              xlabel: str = "", ylabel: str = "") -> str:
    """One polyline per named series; NaNs break the line."""
    xs = np.concatenate([np.asarray(x, dtype=float) for x, _ in series.values()]) if series else np.zeros(0)
    ys = np.concatenate([np.asarray(y, dtype=float) for _, y in series.values()]) if series else np.zeros(0)
    ax = _Axes(xs, ys)
    body = ax.frame(title, xlabel, ylabel)
    for i, (name, (x, y)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts, segs = [], []
        for xi, yi in zip(np.asarray(x, dtype=float), np.asarray(y, dtype=float)):
            if np.isfinite(yi):
                pts.append(f"{_fmt(ax.px(xi))},{_fmt(ax.py(yi))}")
            elif pts:
                segs.append(pts)
                pts = []
        if pts:
            segs.append(pts)
        for seg in segs:
            body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(seg)}"/>')
        body.append(f'<text x="{W - PAD + 4}" y="{PAD + 12 * (i + 1)}" font-size="10" fill="{color}">'
                    f'{escape(name)}</text>')
    return _document(body)


def scatter_plot(points: np.ndarray, groups: Sequence[int] | None = None, labels: Sequence[str] | None = None,
                 title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """2-D scatter coloured by integer group, optionally annotated."""
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    groups = np.zeros(len(P), dtype=int) if groups is None else np.asarray(groups, dtype=int)
    ax = _Axes(P[:, 0], P[:, 1])
    body = ax.frame(title, xlabel, ylabel)
    for i, (x, y) in enumerate(P):
        color = PALETTE[int(groups[i]) % len(PALETTE)]
        cx, cy = _fmt(ax.px(x)), _fmt(ax.py(y))
        body.append(f'<circle cx="{cx}" cy="{cy}" r="4" fill="{color}"/>')
        if labels is not None:
            body.append(f'<text x="{cx}" y="{cy}" dx="5" dy="-5" font-size="9">{escape(str(labels[i]))}</text>')
    return _document(body)


def save(path, svg: str) -> None:
    Path(path).write_text(svg, encoding="utf-8", newline="\n")
