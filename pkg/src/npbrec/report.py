"""Image, CSV and SVG writers for reconstruction reports."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

__all__ = ["write_pgm16", "read_pgm16", "write_png8", "write_csv", "write_json", "svg_line_plot", "svg_scatter"]


def _scale(img: np.ndarray, vmax: Optional[float], levels: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    top = float(img.max()) if vmax is None else float(vmax)
    if top <= 0:
        return np.zeros(img.shape, dtype=np.int64)
    return np.clip(np.rint(img / top * levels), 0, levels).astype(np.int64)


def write_pgm16(path: Union[str, Path], img: np.ndarray, vmax: Optional[float] = None) -> Path:
    """Binary 16-bit PGM (P5, maxval 65535, big-endian samples)."""
    q = _scale(img, vmax, 65535)
    h, w = q.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode() + q.astype(">u2").tobytes())
    return path


def read_pgm16(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2", count=w * h).reshape(h, w).astype(np.uint16)


def write_png8(path: Union[str, Path], img: np.ndarray, vmax: Optional[float] = None) -> Optional[Path]:
    """8-bit PNG if Pillow is importable, else ``None``."""
    try:
        from PIL import Image
    except ImportError:
        return None
    path = Path(path)
    Image.fromarray(_scale(img, vmax, 255).astype(np.uint8), mode="L").save(path)
    return path


def _special(v: float) -> Optional[str]:
    """Text for non-finite floats, which plain JSON cannot carry."""
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return None


def _cell(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return _special(v) or repr(v)
    return v


def write_csv(path: Union[str, Path], rows: Sequence[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return _special(v) or v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path: Union[str, Path], doc) -> Path:
    """JSON with sorted keys; non-finite floats become ``"inf"``, ``"-inf"`` or ``"nan"``."""
    path = Path(path)
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    return path


_W, _H, _M = 480, 320, 56


def _ticks(lo: float, hi: float) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / 4 for i in range(5)]


def _frame(xlabel: str, ylabel: str, title: str, xt, yt, xfmt, yfmt, px, py) -> list[str]:
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{_M}" y1="{_H - _M}" x2="{_W - 20}" y2="{_H - _M}" stroke="black"/>',
        f'<line x1="{_M}" y1="30" x2="{_M}" y2="{_H - _M}" stroke="black"/>',
        f'<text x="{_W / 2}" y="{_H - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{_H / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {_H / 2})">{ylabel}</text>',
    ]
    for t in xt:
        x = px(t)
        out.append(f'<line x1="{x:.2f}" y1="{_H - _M}" x2="{x:.2f}" y2="{_H - _M + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{_H - _M + 18}" text-anchor="middle" font-size="10">{xfmt(t)}</text>')
    for t in yt:
        y = py(t)
        out.append(f'<line x1="{_M - 5}" y1="{y:.2f}" x2="{_M}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{_M - 8}" y="{y + 3:.2f}" text-anchor="end" font-size="10">{yfmt(t)}</text>')
    return out


def _mapper(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def svg_line_plot(
    path: Union[str, Path], xs, series: dict, xlabel: str, ylabel: str, title: str = ""
) -> Path:
    """Polyline per named series, sharing one y axis."""
    xs = np.asarray(xs, dtype=np.float64)
    allys = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    px = _mapper(xs.min(), xs.max(), _M, _W - 20)
    py = _mapper(allys.min(), allys.max(), _H - _M, 30)
    out = _frame(xlabel, ylabel, title, _ticks(xs.min(), xs.max()), _ticks(allys.min(), allys.max()),
                 lambda t: f"{t:g}", lambda t: f"{t:.3g}", px, py)
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    for i, (name, ys) in enumerate(series.items()):
        c = colours[i % len(colours)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        for x, y in zip(xs, ys):
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="2.5" fill="{c}"/>')
        out.append(f'<text x="{_W - 24}" y="{40 + 14 * i}" text-anchor="end" font-size="11" fill="{c}">{name}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


def svg_scatter(
    path: Union[str, Path], groups: dict, xlabel: str, ylabel: str, title: str = "", log: bool = True
) -> Path:
    """Scatter of ``{name: (xs, ys)}`` groups, log10 axes by default."""
    tf = (lambda v: np.log10(np.maximum(np.asarray(v, dtype=np.float64), 1e-300))) if log else (
        lambda v: np.asarray(v, dtype=np.float64))
    data = {k: (tf(x), tf(y)) for k, (x, y) in groups.items() if len(x)}
    allx = np.concatenate([d[0] for d in data.values()]) if data else np.zeros(1)
    ally = np.concatenate([d[1] for d in data.values()]) if data else np.zeros(1)
    px = _mapper(allx.min(), allx.max(), _M, _W - 20)
    py = _mapper(ally.min(), ally.max(), _H - _M, 30)
    fmt = (lambda t: f"1e{t:.1f}") if log else (lambda t: f"{t:.3g}")
    out = _frame(xlabel, ylabel, title, _ticks(allx.min(), allx.max()), _ticks(ally.min(), ally.max()), fmt, fmt, px, py)
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    for i, (name, (x, y)) in enumerate(data.items()):
        c = colours[i % len(colours)]
        for a, b in zip(x, y):
            out.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="3" fill="{c}" fill-opacity="0.7"/>')
        out.append(f'<text x="{_W - 24}" y="{40 + 14 * i}" text-anchor="end" font-size="11" fill="{c}">{name}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path
