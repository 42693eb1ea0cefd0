"""Deterministic CSV, JSON and SVG writers.

Every artifact carries the run's seed and config hash. Floats are written
with 17 significant digits so that files round-trip exactly and identical
inputs give identical bytes.
"""

from __future__ import annotations

import json
import math
from typing import Iterable, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np


def fmt_float(v) -> str:
    return format(float(v), ".17g")


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable, seed: int, config_hash: str, comments: Sequence[str] = ()) -> None:
    """Comma-separated file with a ``# seed=... config_hash=...`` first line."""
    lines = [f"# seed={seed} config_hash={config_hash}"]
    lines += [f"# {c}" for c in comments]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path) -> Tuple[list, np.ndarray]:
    """Header and float rows of a file written by :func:`write_csv`."""
    with open(path) as fh:
        lines = [ln for ln in fh.read().split("\n") if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    rows = [[float(c) for c in ln.split(",")] for ln in lines[1:]]
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def to_jsonable(v):
    if isinstance(v, dict):
        return {str(k): to_jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [to_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return to_jsonable(v.tolist())
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            raise ValueError("refusing to write a non-finite value to JSON")
        return v
    return v


def write_json(path, payload: dict, seed: int, config_hash: str) -> None:
    body = to_jsonable({**payload, "seed": seed, "config_hash": config_hash})
    with open(path, "w", newline="\n") as fh:
        fh.write(json.dumps(body, sort_keys=True, indent=2) + "\n")


# -- SVG ---------------------------------------------------------------------------

_W, _H = 640, 480
_LEFT, _RIGHT, _TOP, _BOTTOM = 70, 20, 40, 55
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _num(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:.4g}"


def _range(values: Sequence[np.ndarray]) -> Tuple[float, float]:
    vals = [np.asarray(v, dtype=float).ravel() for v in values if np.size(v)]
    if not vals:
        return 0.0, 1.0
    lo = min(float(v.min()) for v in vals)
    hi = max(float(v.max()) for v in vals)
    if hi - lo < 1e-12 * max(1.0, abs(lo)):
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def emit_svg(
    path,
    series: Sequence[Tuple[str, Sequence[float], Sequence[float]]] = (),
    scatter: Optional[np.ndarray] = None,
    title: str = "",
    xlabel: str = "x",
    ylabel: str = "y",
    seed: Optional[int] = None,
    config_hash: str = "",
) -> None:
    """Standalone SVG line plot (``series``) and/or 2D scatter.

    Each series is ``(label, x, y)`` and becomes one polyline. The layout is
    a fixed function of the data, so equal inputs give equal files.

    Raises:
        ValueError: On non-finite data or mismatched series lengths.
        OSError: If the file cannot be written.
    """
    clean = []
    for label, x, y in series:
        x, y = np.asarray(x, dtype=float).ravel(), np.asarray(y, dtype=float).ravel()
        if x.shape != y.shape:
            raise ValueError(f"series {label!r}: x and y lengths differ")
        clean.append((label, x, y))
    pts = np.zeros((0, 2)) if scatter is None else np.asarray(scatter, dtype=float).reshape(-1, 2)
    for _, x, y in clean:
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("plot data must be finite")
    if not np.all(np.isfinite(pts)):
        raise ValueError("plot data must be finite")

    x0, x1 = _range([x for _, x, _ in clean] + [pts[:, 0]])
    y0, y1 = _range([y for _, _, y in clean] + [pts[:, 1]])
    pw, ph = _W - _LEFT - _RIGHT, _H - _TOP - _BOTTOM

    def sx(v):
        return _LEFT + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return _TOP + ph - (v - y0) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f"<desc>seed={seed} config_hash={escape(config_hash)}</desc>",
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
    ]
    bx, by = _LEFT, _TOP + ph
    out.append(f'<line x1="{bx}" y1="{by}" x2="{bx + pw}" y2="{by}" stroke="black"/>')
    out.append(f'<line x1="{bx}" y1="{_TOP}" x2="{bx}" y2="{by}" stroke="black"/>')
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        px, py = sx(xv), sy(yv)
        out.append(f'<line x1="{_num(px)}" y1="{by}" x2="{_num(px)}" y2="{by + 5}" stroke="black"/>')
        out.append(
            f'<text x="{_num(px)}" y="{by + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{_tick_label(xv)}</text>'
        )
        out.append(f'<line x1="{bx - 5}" y1="{_num(py)}" x2="{bx}" y2="{_num(py)}" stroke="black"/>')
        out.append(
            f'<text x="{bx - 8}" y="{_num(py + 4)}" text-anchor="end" font-family="sans-serif" font-size="11">{_tick_label(yv)}</text>'
        )
    out.append(
        f'<text x="{_LEFT + pw // 2}" y="{_H - 12}" text-anchor="middle" font-family="sans-serif" font-size="13">{escape(xlabel)}</text>'
    )
    out.append(
        f'<text x="16" y="{_TOP + ph // 2}" text-anchor="middle" font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 16 {_TOP + ph // 2})">{escape(ylabel)}</text>'
    )
    if pts.shape[0]:
        out.append('<g fill="#1f77b4" fill-opacity="0.5">')
        out.extend(f'<circle cx="{_num(sx(a))}" cy="{_num(sy(b))}" r="1.5"/>' for a, b in pts)
        out.append("</g>")
    for i, (label, x, y) in enumerate(clean):
        color = _COLORS[i % len(_COLORS)]
        if x.size:
            coords = " ".join(f"{_num(sx(a))},{_num(sy(b))}" for a, b in zip(x, y))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = _TOP + 14 + 16 * i
        out.append(
            f'<text x="{_LEFT + pw - 4}" y="{ly}" text-anchor="end" font-family="sans-serif" font-size="11" fill="{color}">{escape(label)}</text>'
        )
    out.append("</svg>")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")
