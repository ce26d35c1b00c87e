"""Self-contained SVG renderings of the analysis outputs.

Three chart shapes cover every report the toolkit writes: line charts
(robustness sweeps, occlusion recall by position), overlaid step histograms
(aggregate CDE reports) and grid heatmaps (per-image CDE maps).
"""

from __future__ import annotations

import csv
import json
import os
from html import escape
from pathlib import Path
from typing import Any, Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")
WIDTH, HEIGHT = 560, 380
MARGIN = {"left": 64, "right": 150, "top": 40, "bottom": 52}


class PlotInputError(ValueError):
    """An input file does not match any known analysis format."""


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


class _Frame:
    """Maps data coordinates into the plot area and collects SVG elements."""

    def __init__(self, title: str, xlabel: str, ylabel: str, xlim: tuple[float, float],
                 ylim: tuple[float, float]):
        self.xlim = xlim if xlim[1] > xlim[0] else (xlim[0] - 0.5, xlim[0] + 0.5)
        self.ylim = ylim if ylim[1] > ylim[0] else (ylim[0] - 0.5, ylim[0] + 0.5)
        self.x0, self.x1 = MARGIN["left"], WIDTH - MARGIN["right"]
        self.y0, self.y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
        self.parts: list[str] = [
            f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
            f'<text x="{(self.x0 + self.x1) / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" '
            f'font-size="12">{escape(xlabel)}</text>',
            f'<text x="16" y="{(self.y0 + self.y1) / 2:.1f}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 16 {(self.y0 + self.y1) / 2:.1f})">{escape(ylabel)}</text>',
            f'<rect x="{self.x0}" y="{self.y1}" width="{self.x1 - self.x0}" height="{self.y0 - self.y1}" '
            'fill="none" stroke="#333"/>',
        ]
        for t in _ticks(*self.xlim):
            x = self.sx(t)
            self.parts.append(f'<line x1="{x:.1f}" y1="{self.y0}" x2="{x:.1f}" y2="{self.y0 + 4}" stroke="#333"/>')
            self.parts.append(f'<text x="{x:.1f}" y="{self.y0 + 17}" text-anchor="middle" '
                              f'font-size="11">{_fmt(t)}</text>')
        for t in _ticks(*self.ylim):
            y = self.sy(t)
            self.parts.append(f'<line x1="{self.x0 - 4}" y1="{y:.1f}" x2="{self.x0}" y2="{y:.1f}" stroke="#333"/>')
            self.parts.append(f'<text x="{self.x0 - 7}" y="{y + 4:.1f}" text-anchor="end" '
                              f'font-size="11">{_fmt(t)}</text>')
        self.legend: list[tuple[str, str]] = []

    def sx(self, v: float) -> float:
        lo, hi = self.xlim
        return self.x0 + (v - lo) / (hi - lo) * (self.x1 - self.x0)

    def sy(self, v: float) -> float:
        lo, hi = self.ylim
        return self.y0 - (v - lo) / (hi - lo) * (self.y0 - self.y1)

    def polyline(self, xs: Sequence[float], ys: Sequence[float], color: str, label: str,
                 markers: bool = True) -> None:
        pts = " ".join(f"{self.sx(x):.1f},{self.sy(y):.1f}" for x, y in zip(xs, ys))
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        if markers:
            for x, y in zip(xs, ys):
                self.parts.append(f'<circle cx="{self.sx(x):.1f}" cy="{self.sy(y):.1f}" r="3" fill="{color}"/>')
        self.legend.append((label, color))

    def render(self) -> str:
        for i, (label, color) in enumerate(self.legend):
            y = MARGIN["top"] + 8 + 18 * i
            x = WIDTH - MARGIN["right"] + 12
            self.parts.append(f'<rect x="{x}" y="{y - 8}" width="12" height="10" fill="{color}"/>')
            self.parts.append(f'<text x="{x + 17}" y="{y + 1}" font-size="11">{escape(label)}</text>')
        return _svg(self.parts)


def _svg(parts: list[str], width: int = WIDTH, height: int = HEIGHT) -> str:
    body = "\n  ".join(parts)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif">\n'
            f'  <rect width="100%" height="100%" fill="white"/>\n  {body}\n</svg>\n')


# --------------------------------------------------------------------------
# chart builders
# --------------------------------------------------------------------------

def robustness_svg(series: dict[str, list[tuple[float, float]]], kind: str) -> str:
    """Accuracy against corruption strength, one line per checkpoint."""
    xs = [x for pts in series.values() for x, _ in pts]
    frame = _Frame(f"Robustness to {kind}", kind, "accuracy", (min(xs), max(xs)), (0.0, 1.0))
    for i, (label, pts) in enumerate(sorted(series.items())):
        pts = sorted(pts)
        frame.polyline([p[0] for p in pts], [p[1] for p in pts], PALETTE[i % len(PALETTE)], label)
    return frame.render()


def histogram_svg(reports: dict[str, dict[str, Any]]) -> str:
    """Overlaid step histograms of aggregate normalized-CDE reports."""
    peak = max(max(r["histogram"]["mass"]) for r in reports.values())
    frame = _Frame("Normalized CDE distribution", "normalized CDE", "mass", (0.0, 1.0), (0.0, max(peak, 1e-9)))
    for i, (label, rep) in enumerate(sorted(reports.items())):
        edges, mass = rep["histogram"]["edges"], rep["histogram"]["mass"]
        xs, ys = [edges[0]], [0.0]
        for lo, hi, m in zip(edges[:-1], edges[1:], mass):
            xs += [lo, hi]
            ys += [m, m]
        xs.append(edges[-1])
        ys.append(0.0)
        ent = rep.get("entropy", {}).get("mean")
        name = f"{label} (H={ent:.2f})" if ent is not None else label
        frame.polyline(xs, ys, PALETTE[i % len(PALETTE)], name, markers=False)
    return frame.render()


def occlusion_svg(rows: list[dict[str, float]], title: str) -> str:
    """Recall with one region masked, by raster position, one line per mask size."""
    sizes = sorted({int(r["mask_size"]) for r in rows})
    longest = max(sum(1 for r in rows if int(r["mask_size"]) == s) for s in sizes)
    frame = _Frame(title, "masked position (row-major)", "fake recall", (0.0, max(longest - 1, 1)), (0.0, 1.0))
    for i, size in enumerate(sizes):
        sel = [r for r in rows if int(r["mask_size"]) == size]
        sel.sort(key=lambda r: (r["row"], r["col"]))
        frame.polyline(list(range(len(sel))), [float(r["recall"]) for r in sel], PALETTE[i % len(PALETTE)],
                       f"mask {size}px", markers=len(sel) <= 16)
    return frame.render()


def heatmap_svg(cells: list[dict[str, float]], title: str, cell: int = 36) -> str:
    """Grayscale grid of normalized CDE values (white = 1)."""
    rows = max(int(c["row"]) for c in cells) + 1
    cols = max(int(c["col"]) for c in cells) + 1
    top = 40
    width, height = max(cols * cell + 40, 240), rows * cell + top + 20
    parts = [f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>']
    for c in cells:
        v = min(max(float(c["normalized"]), 0.0), 1.0)
        g = round(v * 255)
        x = 20 + int(c["col"]) * cell
        y = top + int(c["row"]) * cell
        parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})" '
                     f'stroke="#888" stroke-width="0.5"><title>cde={float(c["cde"]):.4g}</title></rect>')
    return _svg(parts, width, height)


# --------------------------------------------------------------------------
# input detection
# --------------------------------------------------------------------------

def load_input(path: str | os.PathLike) -> tuple[str, Any]:
    """Classify an analysis file as ``sweep``, ``cde_aggregate``, ``occlusion`` or ``cde_map``."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".csv":
        reader = csv.DictReader(text.splitlines())
        header = tuple(reader.fieldnames or ())
        rows = list(reader)
        if not rows:
            raise PlotInputError(f"{path}: empty table")
        try:
            if header == ("mask_size", "row", "col", "recall", "drop"):
                return "occlusion", [{k: float(v) for k, v in r.items()} for r in rows]
            if header == ("row", "col", "cde", "normalized"):
                return "cde_map", [{k: float(v) for k, v in r.items()} for r in rows]
        except ValueError as exc:
            raise PlotInputError(f"{path}: non-numeric cell ({exc})") from exc
        raise PlotInputError(f"{path}: unrecognized CSV header {header}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PlotInputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    if isinstance(doc, dict) and "histogram" in doc:
        hist = doc["histogram"]
        if not (isinstance(hist, dict) and len(hist.get("edges", [])) == len(hist.get("mass", [])) + 1):
            raise PlotInputError(f"{path}: malformed histogram")
        return "cde_aggregate", doc
    if isinstance(doc, dict) and isinstance(doc.get("records"), list):
        recs = doc["records"]
        if not recs or not all(isinstance(r, dict) and {"kind", "param"} <= set(r) for r in recs):
            raise PlotInputError(f"{path}: sweep records need 'kind' and 'param'")
        return "sweep", doc
    raise PlotInputError(f"{path}: unrecognized analysis document")


def render_inputs(paths: Sequence[str | os.PathLike], out_dir: str | os.PathLike) -> list[Path]:
    """Render every input into ``out_dir``; returns the written SVG paths.

    All sweep files are merged per corruption kind (one line per checkpoint)
    and all aggregate CDE reports share one overlaid histogram.
    """
    if not paths:
        raise PlotInputError("no inputs given")
    loaded = [(Path(p), *load_input(p)) for p in paths]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    sweeps: dict[str, dict[str, list[tuple[float, float]]]] = {}
    aggregates: dict[str, dict[str, Any]] = {}
    for path, kind, data in loaded:
        if kind == "sweep":
            label = str(data.get("label", path.stem))
            for r in data["records"]:
                if r.get("unsupported"):
                    continue
                sweeps.setdefault(r["kind"], {}).setdefault(label, []).append((float(r["param"]),
                                                                               float(r["accuracy"])))
        elif kind == "cde_aggregate":
            aggregates[str(data.get("label", path.stem))] = data
        elif kind == "occlusion":
            target = out / f"{path.stem}.svg"
            target.write_text(occlusion_svg(data, f"Occlusion recall: {path.stem}"), encoding="utf-8")
            written.append(target)
        else:
            target = out / f"{path.stem}.svg"
            target.write_text(heatmap_svg(data, f"CDE map: {path.stem}"), encoding="utf-8")
            written.append(target)
    for kind, series in sorted(sweeps.items()):
        series = {k: v for k, v in series.items() if v}
        if not series:
            continue
        target = out / f"robustness_{kind}.svg"
        target.write_text(robustness_svg(series, kind), encoding="utf-8")
        written.append(target)
    if aggregates:
        target = out / "cde_histogram.svg"
        target.write_text(histogram_svg(aggregates), encoding="utf-8")
        written.append(target)
    return written
