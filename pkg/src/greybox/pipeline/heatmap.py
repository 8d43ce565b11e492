"""Heatmap export of standardized signatures: a z-score CSV matrix and a static SVG."""

from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..anomaly import standardize
from ..errors import ValidationError
from .io import fmt
from .run import SIGNATURE_FIELDS, SignatureTable

CLIP = 4.0
CELL_W, CELL_H = 12, 20
LEFT, TOP = 70, 30
_NEG = np.array([33, 102, 172])
_MID = np.array([247, 247, 247])
_POS = np.array([178, 24, 43])


def z_matrix(table: SignatureTable, sensor: str, step: str, window: int | None = None):
    """Rows ``gamma .. x, ssr, anom``; columns are the wafers in time order."""
    try:
        wafers, X = table.block(sensor, step)
    except ValueError as exc:
        raise ValidationError(f"no columns for {sensor}/{step} in table {table.tool}", [str(exc)]) from exc
    if len(wafers) < 2:
        raise ValidationError(f"{sensor}/{step}: need at least two fitted wafers for a heatmap")
    return wafers, standardize(X, window).T


def color(z: float) -> str:
    t = float(np.clip(z, -CLIP, CLIP)) / CLIP
    end = _POS if t > 0 else _NEG
    rgb = np.rint(_MID + abs(t) * (end - _MID)).astype(int)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def svg_text(wafers: list[str], Z: np.ndarray, title: str) -> str:
    n_rows, n_cols = Z.shape
    width = LEFT + n_cols * CELL_W + 10
    height = TOP + n_rows * CELL_H + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<text x="{LEFT}" y="18">{escape(title)}</text>']
    for i, name in enumerate(SIGNATURE_FIELDS):
        y = TOP + i * CELL_H
        out.append(f'<text x="{LEFT - 6}" y="{y + CELL_H * 0.7:.1f}" text-anchor="end">{name}</text>')
        for j in range(n_cols):
            out.append(f'<rect x="{LEFT + j * CELL_W}" y="{y}" width="{CELL_W}" height="{CELL_H}" '
                       f'fill="{color(Z[i, j])}"><title>{escape(wafers[j])} {name} z={Z[i, j]:.3f}</title></rect>')
    y = TOP + n_rows * CELL_H + 20
    out.append(f'<text x="{LEFT}" y="{y}">time order: {escape(wafers[0])} .. {escape(wafers[-1])}; '
               f'colour clipped at |z| = {CLIP:g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_heatmap(table: SignatureTable, triple: tuple[str, str, str], out_prefix,
                   window: int | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` and ``<prefix>.svg`` for one (tool, sensor, step)."""
    tool, sensor, step = triple
    if tool != table.tool:
        raise ValidationError(f"table is for tool {table.tool!r}, not {tool!r}")
    wafers, Z = z_matrix(table, sensor, step, window)
    prefix = Path(out_prefix)
    csv_path, svg_path = prefix.with_suffix(".csv"), prefix.with_suffix(".svg")
    try:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row"] + wafers)
            for name, row in zip(SIGNATURE_FIELDS, Z):
                w.writerow([name] + [fmt(v) for v in row])
        svg_path.write_text(svg_text(wafers, Z, f"{tool} {sensor} {step}"), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {prefix}: {exc}") from exc
    return csv_path, svg_path


def read_z_matrix(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    wafers = rows[0][1:]
    names = [r[0] for r in rows[1:]]
    return names, wafers, np.array([[float(v) for v in r[1:]] for r in rows[1:]])
