"""Static SVG line charts drawn with reportlab's graphics toolkit."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

from reportlab.graphics import renderSVG
from reportlab.graphics.charts.legends import Legend
from reportlab.graphics.charts.lineplots import LinePlot
from reportlab.graphics.shapes import Drawing, String
from reportlab.graphics.widgets.markers import makeMarker
from reportlab.lib import colors

from mixedprefix.utils.files import atomic_write_text

PALETTE = [
    colors.HexColor("#1f77b4"),
    colors.HexColor("#d62728"),
    colors.HexColor("#2ca02c"),
    colors.HexColor("#ff7f0e"),
    colors.HexColor("#9467bd"),
    colors.HexColor("#8c564b"),
]


def _span(values: Sequence[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi - lo < 1e-9:
        return lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def line_chart_svg(
    series: Mapping[str, Sequence[tuple[float, float]]],
    title: str,
    x_label: str,
    y_label: str,
) -> str:
    names = [n for n in series if series[n]]
    drawing = Drawing(520, 340)
    drawing.add(String(260, 318, title, textAnchor="middle", fontSize=12))
    if not names:
        drawing.add(String(260, 170, "no data", textAnchor="middle", fontSize=10))
        return renderSVG.drawToString(drawing)

    plot = LinePlot()
    plot.x, plot.y, plot.width, plot.height = 60, 50, 320, 240
    plot.data = [sorted(series[n]) for n in names]
    xs = [p[0] for n in names for p in series[n]]
    ys = [p[1] for n in names for p in series[n]]
    plot.xValueAxis.valueMin, plot.xValueAxis.valueMax = _span(xs)
    plot.yValueAxis.valueMin, plot.yValueAxis.valueMax = _span(ys)
    plot.xValueAxis.labelTextFormat = "%.1f"
    plot.yValueAxis.labelTextFormat = "%.2f"
    for i, _ in enumerate(names):
        color = PALETTE[i % len(PALETTE)]
        plot.lines[i].strokeColor = color
        plot.lines[i].strokeWidth = 1.5
        plot.lines[i].symbol = makeMarker("FilledCircle", size=4, fillColor=color, strokeColor=color)
    drawing.add(plot)

    legend = Legend()
    legend.x, legend.y = 392, 290
    legend.fontSize = 8
    legend.alignment = "right"
    legend.colorNamePairs = [(PALETTE[i % len(PALETTE)], n) for i, n in enumerate(names)]
    drawing.add(legend)
    drawing.add(String(220, 18, x_label, textAnchor="middle", fontSize=9))
    drawing.add(String(14, 170, y_label, textAnchor="middle", fontSize=9))
    return renderSVG.drawToString(drawing)


def write_line_chart(path: Path, series: Mapping[str, Sequence[tuple[float, float]]], title: str, x_label: str, y_label: str) -> Path:
    return atomic_write_text(Path(path), line_chart_svg(series, title, x_label, y_label))
