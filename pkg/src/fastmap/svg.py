"""Deterministic SVG rendering of BEV scenes, predictions, heatmaps and priors."""

from __future__ import annotations

from typing import Optional, Sequence
from xml.sax.saxutils import quoteattr

import numpy as np

from .geometry import BevGridSpec, BevRange, MapClass, MapInstance

CLASS_COLORS = {
    MapClass.DIVIDER: "#ff7f0e",
    MapClass.PED_CROSSING: "#1f77b4",
    MapClass.BOUNDARY: "#2ca02c",
}
# rgb triples for heatmap channels, same hues as CLASS_COLORS
CHANNEL_RGB = ((255, 127, 14), (31, 119, 180), (44, 160, 44))
GRID_STEP = 5.0
MARGIN = 10


def _f(v: float) -> str:
    return f"{v:.2f}"


class BevCanvas:
    """Maps metric BEV coordinates to SVG pixels; +y (forward) points up."""

    def __init__(self, rng: BevRange, scale: float = 10.0):
        self.rng = rng
        self.scale = scale
        self.width = rng.x_extent * scale + 2 * MARGIN
        self.height = rng.y_extent * scale + 2 * MARGIN
        self.items: list[str] = []

    def px(self, x: float, y: float) -> tuple[float, float]:
        return (MARGIN + (x - self.rng.x_min) * self.scale,
                MARGIN + (self.rng.y_max - y) * self.scale)

    def add(self, element: str) -> None:
        self.items.append(element)

    def frame_and_grid(self, step: float = GRID_STEP) -> None:
        r = self.rng
        x0, y0 = self.px(r.x_min, r.y_max)
        self.add(f'<rect class="frame" x="{_f(x0)}" y="{_f(y0)}" width="{_f(r.x_extent * self.scale)}" '
                 f'height="{_f(r.y_extent * self.scale)}" fill="white" stroke="black" stroke-width="1"/>')
        lines = []
        for x in np.arange(np.ceil(r.x_min / step) * step, r.x_max + 1e-9, step):
            a, b = self.px(x, r.y_min), self.px(x, r.y_max)
            lines.append(f'<line x1="{_f(a[0])}" y1="{_f(a[1])}" x2="{_f(b[0])}" y2="{_f(b[1])}"/>')
        for y in np.arange(np.ceil(r.y_min / step) * step, r.y_max + 1e-9, step):
            a, b = self.px(r.x_min, y), self.px(r.x_max, y)
            lines.append(f'<line x1="{_f(a[0])}" y1="{_f(a[1])}" x2="{_f(b[0])}" y2="{_f(b[1])}"/>')
        self.add('<g class="grid" stroke="#dddddd" stroke-width="0.5">' + "".join(lines) + "</g>")

    def heatmap(self, hm: np.ndarray, spec: BevGridSpec, floor: float = 0.05) -> None:
        """One rect per cell whose strongest channel exceeds ``floor``, colored by that channel."""
        cells = []
        best = hm.argmax(axis=0)
        peak = hm.max(axis=0)
        cw = spec.resolution * self.scale
        for row, col in zip(*np.nonzero(peak > floor)):
            x = spec.range.x_min + col * spec.resolution
            y = spec.range.y_min + (row + 1) * spec.resolution
            px, py = self.px(x, y)
            r, g, b = CHANNEL_RGB[int(best[row, col]) % len(CHANNEL_RGB)]
            cells.append(f'<rect x="{_f(px)}" y="{_f(py)}" width="{_f(cw)}" height="{_f(cw)}" '
                         f'fill="rgb({r},{g},{b})" fill-opacity="{peak[row, col]:.3f}"/>')
        self.add('<g class="heatmap">' + "".join(cells) + "</g>")

    def instance(self, inst: MapInstance, dashed: bool = False, label: Optional[str] = None) -> None:
        pts = [self.px(x, y) for x, y in inst.points]
        d = "M " + " L ".join(f"{_f(a)} {_f(b)}" for a, b in pts) + (" Z" if inst.closed else "")
        dash = ' stroke-dasharray="4 3"' if dashed else ""
        kind = "pred" if dashed else "gt"
        title = f"<title>{label}</title>" if label else ""
        self.add(f'<path class={quoteattr(kind + " " + inst.cls.label)} d="{d}" fill="none" '
                 f'stroke="{CLASS_COLORS[inst.cls]}" stroke-width="2"{dash}>{title}</path>')

    def markers(self, pts: np.ndarray, color: str = "#d62728", radius: float = 1.5) -> None:
        dots = "".join(f'<circle cx="{_f(a)}" cy="{_f(b)}" r="{radius}"/>' for a, b in (self.px(x, y) for x, y in pts))
        self.add(f'<g class="priors" fill="{color}">{dots}</g>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(self.width)}" height="{_f(self.height)}" '
                f'viewBox="0 0 {_f(self.width)} {_f(self.height)}">')
        return '<?xml version="1.0" encoding="UTF-8"?>\n' + head + "\n" + "\n".join(self.items) + "\n</svg>\n"


def render_scene(rng: BevRange, gts: Sequence[MapInstance] = (), preds: Sequence[MapInstance] = (),
                 heatmap: Optional[np.ndarray] = None, spec: Optional[BevGridSpec] = None,
                 priors: Optional[np.ndarray] = None, scale: float = 10.0) -> str:
    canvas = BevCanvas(rng, scale)
    canvas.frame_and_grid()
    if heatmap is not None:
        canvas.heatmap(heatmap, spec or BevGridSpec.from_resolution(rng.y_extent / heatmap.shape[1], rng))
    for inst in gts:
        canvas.instance(inst)
    for inst in preds:
        canvas.instance(inst, dashed=True)
    if priors is not None and len(priors):
        canvas.markers(priors)
    return canvas.render()
