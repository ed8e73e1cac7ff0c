"""Vector charts for reports built with reportlab.graphics (PDF and SVG output)."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from reportlab.graphics import renderPDF, renderSVG
from reportlab.graphics.charts.barcharts import VerticalBarChart
from reportlab.graphics.charts.legends import Legend
from reportlab.graphics.charts.lineplots import LinePlot
from reportlab.graphics.shapes import Drawing, Rect, String
from reportlab.graphics.widgets.markers import makeMarker
from reportlab.lib import colors

PALETTE = [
    colors.HexColor("#1f77b4"),
    colors.HexColor("#d62728"),
    colors.HexColor("#2ca02c"),
    colors.HexColor("#9467bd"),
    colors.HexColor("#ff7f0e"),
    colors.HexColor("#17becf"),
]

WIDTH, HEIGHT = 480, 320


def _finite(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    return [(float(x), float(y)) for x, y in points if math.isfinite(x) and math.isfinite(y)]


def make_line_chart(
    title: str,
    series: Mapping[str, Sequence[tuple[float, float]]],
    x_label: str = "",
    y_label: str = "",
) -> Drawing:
    drawing = Drawing(WIDTH, HEIGHT)
    drawing.add(String(WIDTH / 2, HEIGHT - 18, title, textAnchor="middle", fontSize=12))
    names = [name for name, pts in series.items() if _finite(pts)]
    plot = LinePlot()
    plot.x, plot.y = 60, 50
    plot.width, plot.height = WIDTH - 170, HEIGHT - 90
    plot.data = [sorted(_finite(series[name])) for name in names] or [[(0.0, 0.0)]]
    for i in range(len(plot.data)):
        plot.lines[i].strokeColor = PALETTE[i % len(PALETTE)]
        plot.lines[i].strokeWidth = 1.5
        plot.lines[i].symbol = makeMarker("Circle", size=3)
    plot.xValueAxis.labelTextFormat = "%.2f"
    plot.yValueAxis.labelTextFormat = "%.3f"
    drawing.add(plot)
    if names:
        legend = Legend()
        legend.x, legend.y = WIDTH - 100, HEIGHT - 50
        legend.fontSize = 8
        legend.colorNamePairs = [(PALETTE[i % len(PALETTE)], name) for i, name in enumerate(names)]
        drawing.add(legend)
    drawing.add(String(plot.x + plot.width / 2, 15, x_label, textAnchor="middle", fontSize=9))
    drawing.add(String(12, plot.y + plot.height / 2, y_label, fontSize=9))
    return drawing


def make_bar_chart(title: str, categories: Sequence[str], values: Sequence[float]) -> Drawing:
    drawing = Drawing(WIDTH, HEIGHT)
    drawing.add(String(WIDTH / 2, HEIGHT - 18, title, textAnchor="middle", fontSize=12))
    chart = VerticalBarChart()
    chart.x, chart.y = 50, 50
    chart.width, chart.height = WIDTH - 80, HEIGHT - 90
    chart.data = [[float(v) if math.isfinite(float(v)) else 0.0 for v in values] or [0.0]]
    chart.categoryAxis.categoryNames = [str(c) for c in categories] or [""]
    chart.categoryAxis.labels.fontSize = 7
    chart.bars[0].fillColor = PALETTE[0]
    drawing.add(chart)
    return drawing


def _heat_color(t: float) -> colors.Color:
    t = min(max(t, 0.0), 1.0)
    return colors.Color(0.15 + 0.85 * t, 0.25 + 0.5 * (1 - abs(2 * t - 1)), 1.0 - 0.85 * t)


def make_heatmap(
    title: str,
    xs: Sequence[float],
    ys: Sequence[float],
    values: np.ndarray,
    anchors: Mapping[str, tuple[float, float]] | None = None,
) -> Drawing:
    """Grid of colored cells (low = blue, high = red); values are log-scaled when positive."""
    drawing = Drawing(WIDTH, HEIGHT)
    drawing.add(String(WIDTH / 2, HEIGHT - 18, title, textAnchor="middle", fontSize=12))
    grid = np.asarray(values, dtype=np.float64)
    shown = np.log10(grid) if np.all(grid[np.isfinite(grid)] > 0) else grid
    finite = shown[np.isfinite(shown)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    span = hi - lo or 1.0
    left, bottom = 50.0, 40.0
    width, height = WIDTH - 100.0, HEIGHT - 80.0
    cell_w, cell_h = width / len(xs), height / len(ys)
    for j in range(len(ys)):
        for i in range(len(xs)):
            v = shown[j, i]
            fill = _heat_color((v - lo) / span) if math.isfinite(v) else colors.black
            drawing.add(Rect(left + i * cell_w, bottom + j * cell_h, cell_w, cell_h, fillColor=fill, strokeColor=None))
    if anchors:
        x0, x1 = float(xs[0]), float(xs[-1])
        y0, y1 = float(ys[0]), float(ys[-1])
        for name, (ax, ay) in anchors.items():
            px = left + (ax - x0) / ((x1 - x0) or 1.0) * width
            py = bottom + (ay - y0) / ((y1 - y0) or 1.0) * height
            drawing.add(String(px, py, name, textAnchor="middle", fontSize=9, fillColor=colors.white))
    drawing.add(String(WIDTH / 2, 15, f"range {lo:.3g} .. {hi:.3g}", textAnchor="middle", fontSize=8))
    return drawing


def save_drawing(drawing: Drawing, filepath: Path | str) -> Path:
    path = Path(filepath)
    if path.suffix.lower() == ".svg":
        renderSVG.drawToFile(drawing, str(path))
    else:
        renderPDF.drawToFile(drawing, str(path))
    return path
