"""Dependency-free SVG precision-recall figures."""

from __future__ import annotations

import xml.etree.ElementTree as ET

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]

WIDTH, HEIGHT = 640, 520
LEFT, RIGHT, TOP, BOTTOM = 60, 170, 20, 50


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _sx(recall: float) -> float:
    return LEFT + recall * (WIDTH - LEFT - RIGHT)


def _sy(precision: float) -> float:
    return HEIGHT - BOTTOM - precision * (HEIGHT - TOP - BOTTOM)


def pr_figure(curves: dict, points: dict | None = None, title: str = "") -> str:
    """Render curves {name: [(recall, precision), ...]} as polylines.

    ``points`` maps the same names to lists of (recall, precision) markers,
    drawn in the matching curve colour (observer agreement points).
    """
    points = points or {}
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(WIDTH),
                     height=str(HEIGHT), viewBox=f"0 0 {WIDTH} {HEIGHT}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(WIDTH), height=str(HEIGHT), fill="white")
    axes = ET.SubElement(svg, "g", id="axes", stroke="black", fill="none")
    ET.SubElement(axes, "rect", x=_fmt(_sx(0)), y=_fmt(_sy(1)),
                  width=_fmt(_sx(1) - _sx(0)), height=_fmt(_sy(0) - _sy(1)))
    labels = ET.SubElement(svg, "g", id="ticks", fill="black")
    labels.set("font-family", "sans-serif")
    labels.set("font-size", "11")
    for k in range(6):
        v = k / 5
        ET.SubElement(axes, "line", x1=_fmt(_sx(v)), y1=_fmt(_sy(0)), x2=_fmt(_sx(v)), y2=_fmt(_sy(0) + 5))
        ET.SubElement(axes, "line", x1=_fmt(_sx(0) - 5), y1=_fmt(_sy(v)), x2=_fmt(_sx(0)), y2=_fmt(_sy(v)))
        t = ET.SubElement(labels, "text", x=_fmt(_sx(v) - 8), y=_fmt(_sy(0) + 18))
        t.text = f"{v:.1f}"
        t = ET.SubElement(labels, "text", x=_fmt(_sx(0) - 30), y=_fmt(_sy(v) + 4))
        t.text = f"{v:.1f}"
    t = ET.SubElement(labels, "text", x=_fmt((_sx(0) + _sx(1)) / 2 - 20), y=str(HEIGHT - 12))
    t.text = "Recall"
    t = ET.SubElement(labels, "text", x="12", y=_fmt((_sy(0) + _sy(1)) / 2),
                      transform=f"rotate(-90 12 {_fmt((_sy(0) + _sy(1)) / 2)})")
    t.text = "Precision"
    if title:
        t = ET.SubElement(labels, "text", x=_fmt(_sx(0)), y="14")
        t.text = title

    names = list(curves) + [n for n in points if n not in curves]
    for k, name in enumerate(names):
        colour = PALETTE[k % len(PALETTE)]
        group = ET.SubElement(svg, "g", id=f"series-{k}")
        group.set("data-name", str(name))
        if name in curves:
            coords = " ".join(f"{_fmt(_sx(r))},{_fmt(_sy(p))}" for r, p in curves[name])
            ET.SubElement(group, "polyline", points=coords, fill="none", stroke=colour)
            group[-1].set("stroke-width", "1.5")
        for r, p in points.get(name, []):
            ET.SubElement(group, "circle", cx=_fmt(_sx(r)), cy=_fmt(_sy(p)), r="3.5", fill=colour)
        y = TOP + 14 + 16 * k
        ET.SubElement(group, "line", x1=_fmt(WIDTH - RIGHT + 15), y1=str(y - 4),
                      x2=_fmt(WIDTH - RIGHT + 35), y2=str(y - 4), stroke=colour)
        legend = ET.SubElement(group, "text", x=_fmt(WIDTH - RIGHT + 40), y=str(y))
        legend.set("font-family", "sans-serif")
        legend.set("font-size", "11")
        legend.text = str(name)

    ET.indent(svg)
    return ET.tostring(svg, encoding="unicode") + "\n"
