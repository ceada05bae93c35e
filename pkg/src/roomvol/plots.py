"""Minimal SVG writers for confusion heat maps and training curves."""

from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import AssetError, DataFormatError


def _svg(width, height, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            + "\n".join(body) + "\n</svg>\n")


def _text(x, y, s, anchor="middle", rotate=None, size=None):
    tr = f' transform="rotate({rotate} {x:.1f} {y:.1f})"' if rotate is not None else ""
    fs = f' font-size="{size}"' if size else ""
    return f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}"{tr}{fs}>{escape(str(s))}</text>'


def confusion_svg(counts, edges, path=None, title="Confusion (log10 m^3)"):
    """Heat map of ``counts`` (target rows, predicted columns) with a dashed diagonal.

    Row 0 (lowest target bin) is drawn at the bottom so the diagonal rises
    left to right.
    """
    counts = np.asarray(counts)
    edges = np.asarray(edges, dtype=float)
    n = counts.shape[0]
    cell, left, top = 36, 70, 40
    w, h = left + n * cell + 20, top + n * cell + 60
    peak = max(int(counts.max()), 1)
    body = [f'<rect width="{w}" height="{h}" fill="white"/>', _text(w / 2, 22, title, size=13)]
    for i in range(n):
        y = top + (n - 1 - i) * cell
        for j in range(n):
            x = left + j * cell
            shade = int(round(255 * (1 - counts[i, j] / peak)))
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                        f'fill="rgb({shade},{shade},255)" stroke="#ccc"/>')
            if counts[i, j]:
                colour = "white" if shade < 128 else "black"
                body.append(f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 4:.1f}" '
                            f'text-anchor="middle" fill="{colour}">{int(counts[i, j])}</text>')
    x0, y0 = left, top + n * cell
    body.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + n * cell}" y2="{top}" '
                f'stroke="red" stroke-dasharray="4 3"/>')
    for k, e in enumerate(edges):
        body.append(_text(left + k * cell, y0 + 14, f"{e:.2f}", size=9))
        body.append(_text(left - 4, y0 - k * cell + 3, f"{e:.2f}", anchor="end", size=9))
    body.append(_text(left + n * cell / 2, y0 + 34, "predicted"))
    body.append(_text(18, top + n * cell / 2, "target", rotate=-90))
    svg = _svg(w, h, body)
    if path is not None:
        Path(path).write_text(svg)
    return svg


def history_svg(rows, path=None, title="Training history"):
    """Train and validation loss per epoch on a log scale."""
    epochs = np.array([float(r["epoch"]) for r in rows])
    series = {"train_loss": "#1f77b4", "val_loss": "#d62728"}
    w, h, left, top, pw, ph = 520, 320, 60, 36, 420, 230
    body = [f'<rect width="{w}" height="{h}" fill="white"/>', _text(w / 2, 22, title, size=13)]
    vals = np.array([[float(r[k]) for k in series] for r in rows]) if rows else np.ones((1, 2))
    logs = np.log10(np.clip(vals, 1e-12, None))
    lo, hi = float(logs.min()), float(logs.max())
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    e_hi = max(float(epochs.max()) if epochs.size else 1.0, 1.0)

    def px(e, v):
        return left + pw * e / e_hi, top + ph * (1 - (np.log10(max(v, 1e-12)) - lo) / (hi - lo))

    body.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for col, (key, colour) in enumerate(series.items()):
        pts = " ".join("{:.1f},{:.1f}".format(*px(e, v)) for e, v in zip(epochs, vals[:, col]))
        if pts:
            body.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        body.append(f'<line x1="{left + pw - 110}" y1="{top + 14 + 14 * col}" x2="{left + pw - 90}" '
                    f'y2="{top + 14 + 14 * col}" stroke="{colour}" stroke-width="2"/>')
        body.append(_text(left + pw - 86, top + 18 + 14 * col, key, anchor="start"))
    body.append(_text(left - 6, top + 4, f"1e{hi:.1f}", anchor="end", size=9))
    body.append(_text(left - 6, top + ph, f"1e{lo:.1f}", anchor="end", size=9))
    body.append(_text(left, top + ph + 16, "0", size=9))
    body.append(_text(left + pw, top + ph + 16, f"{e_hi:g}", size=9))
    body.append(_text(left + pw / 2, top + ph + 34, "epoch"))
    svg = _svg(w, h, body)
    if path is not None:
        Path(path).write_text(svg)
    return svg


def read_history_csv(path):
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["epoch", "train_loss", "val_loss", "lr"]:
                raise DataFormatError(f"{path}: header must be epoch,train_loss,val_loss,lr")
            return list(reader)
    except FileNotFoundError as exc:
        raise AssetError(f"missing history file {path}") from exc
