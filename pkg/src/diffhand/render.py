"""Offsets to absolute polylines, SVG and raster output."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .data import StrokeSequence

SVG_MARGIN = 0.05


def to_polylines(strokes: StrokeSequence) -> list[np.ndarray]:
    """Absolute pen-down runs starting from the origin.

    A lift ends the current run; the following offset is a pen-up move whose
    endpoint starts the next run.
    """
    pos = np.vstack([np.zeros((1, 2)), np.cumsum(strokes.offsets, axis=0)])
    lines, start = [], 0
    for i, lift in enumerate(strokes.pen_lift):
        if lift:
            lines.append(pos[start : i + 2])
            start = i + 2
    if start < len(pos):
        lines.append(pos[start:])
    return lines


def from_polylines(polylines: Sequence[np.ndarray], final_lift: int = 1) -> StrokeSequence:
    """Differencing inverse of :func:`to_polylines`.

    The lift flag of the very last offset is not recoverable from the runs and
    is taken from ``final_lift``.
    """
    points = np.vstack(polylines)
    offsets = np.diff(points, axis=0)
    lifts = np.zeros(len(offsets), dtype=np.int8)
    ends = np.cumsum([len(p) for p in polylines])[:-1] - 2
    lifts[ends] = 1
    if len(lifts):
        lifts[-1] = final_lift
    return StrokeSequence(offsets, lifts)


# ---------------------------------------------------------------- svg


def _fmt(v: float) -> str:
    s = f"{v:.4f}"
    return "0.0000" if s == "-0.0000" else s


def svg_text(polylines: Sequence[np.ndarray], stroke_width: float = 1.0, flip_y: bool = True) -> str:
    """SVG 1.1 document with coordinates shifted so the fitted viewBox starts at the origin."""
    if not polylines:
        raise ValueError("nothing to render")
    pts = [np.asarray(p, dtype=np.float64).reshape(-1, 2) * (1.0, -1.0 if flip_y else 1.0) for p in polylines]
    allp = np.vstack(pts)
    lo, hi = allp.min(0), allp.max(0)
    size = hi - lo
    margin = SVG_MARGIN * size.max() if size.max() > 0 else stroke_width
    width, height = size + 2 * margin
    body = []
    for p in pts:
        q = p - lo + margin
        if len(q) == 1:
            body.append(f'<circle cx="{_fmt(q[0, 0])}" cy="{_fmt(q[0, 1])}" r="{_fmt(stroke_width / 2)}" fill="black"/>')
        else:
            d = "M" + " L".join(f"{_fmt(x)} {_fmt(y)}" for x, y in q)
            body.append(f'<path d="{d}"/>')
    head = (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_fmt(width)}" height="{_fmt(height)}" '
        f'viewBox="0.0000 0.0000 {_fmt(width)} {_fmt(height)}">\n'
        f'<g fill="none" stroke="black" stroke-width="{_fmt(stroke_width)}" stroke-linecap="round" stroke-linejoin="round">\n'
    )
    return head + "\n".join(body) + "\n</g>\n</svg>\n"


def emit_svg(polylines, path: str | Path, stroke_width: float = 1.0, flip_y: bool = True):
    Path(path).write_text(svg_text(polylines, stroke_width, flip_y), encoding="utf-8")


# ---------------------------------------------------------------- raster


def line_pixels(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Integer Bresenham line including both endpoints."""
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    out = []
    while True:
        out.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _round(v):
    return np.floor(np.asarray(v) + 0.5).astype(int)


def rasterize(polylines: Sequence[np.ndarray], height: int, width: int, supersample: int = 1, margin: int = 1) -> np.ndarray:
    """Aspect-preserving fit, 1-pixel lines, no anti-aliasing.

    Row index grows with y. With ``supersample > 1`` the drawing is made at the
    larger size and box-averaged down, giving values in [0, 1].
    """
    if height < 1 or width < 1:
        raise ValueError("raster dimensions must be positive")
    H, W = height * supersample, width * supersample
    m = min(margin * supersample, (H - 1) // 2, (W - 1) // 2)
    img = np.zeros((H, W), dtype=np.float64)
    pts = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in polylines if len(p)]
    if not pts:
        return img[::supersample, ::supersample] if supersample > 1 else img
    allp = np.vstack(pts)
    lo, hi = allp.min(0), allp.max(0)
    span = hi - lo
    avail = np.array([W - 1 - 2 * m, H - 1 - 2 * m], dtype=np.float64)
    ratios = [avail[i] / span[i] for i in range(2) if span[i] > 0]
    scale = min(ratios) if ratios else 0.0
    offset = m + (avail - span * scale) / 2
    for p in pts:
        q = _round((p - lo) * scale + offset)
        if len(q) == 1:
            img[q[0, 1], q[0, 0]] = 1
        for (x0, y0), (x1, y1) in zip(q[:-1], q[1:]):
            for x, y in line_pixels(int(x0), int(y0), int(x1), int(y1)):
                img[y, x] = 1
    if supersample > 1:
        img = img.reshape(height, supersample, width, supersample).mean((1, 3))
    return img


def write_pgm(img: np.ndarray, path: str | Path, invert: bool = True):
    """Binary PGM; ink is drawn dark on white when ``invert``."""
    data = np.clip(img, 0, 1)
    if invert:
        data = 1 - data
    data = np.floor(data * 255 + 0.5).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
