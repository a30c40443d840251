"""Binary PPM (P6) heatmaps and line charts.

Colormap: piecewise-linear between five stops, dark to bright::

    0.00  (  0,   0,   0)
    0.25  ( 60,  15, 110)
    0.50  (170,  40, 100)
    0.75  (245, 130,  30)
    1.00  (255, 255, 220)

Each channel is rounded half-up to 8 bits. Perceived brightness
(0.30 R + 0.59 G + 0.11 B) increases strictly between stops.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
COLORS = np.array(
    [
        [0, 0, 0],
        [60, 15, 110],
        [170, 40, 100],
        [245, 130, 30],
        [255, 255, 220],
    ],
    dtype=np.float64,
)
SERIES_COLORS = [(255, 200, 40), (80, 180, 255), (255, 80, 80), (120, 230, 120)]


def colormap(t) -> np.ndarray:
    """Map values in [0, 1] to uint8 RGB."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([np.interp(t, STOPS, COLORS[:, c]) for c in range(3)], axis=-1)
    return np.floor(rgb + 0.5).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def emit_heatmap(matrix, path, vmin: float | None = None, vmax: float | None = None, cell: int = 8) -> np.ndarray:
    """Render a rank-2 matrix, one ``cell x cell`` block per entry. Returns the RGB array."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"heatmap needs a non-empty rank-2 matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("heatmap values must be finite")
    lo = m.min() if vmin is None else vmin
    hi = m.max() if vmax is None else vmax
    t = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    rgb = colormap(t)
    rgb = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    write_ppm(path, rgb)
    return rgb


def _line(img, x0, y0, x1, y1, color):
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    while True:
        img[y0, x0] = color
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def emit_curve(series: dict[str, list[float]], path, width: int = 320, height: int = 200) -> np.ndarray:
    """Line chart of one or more equal-length series on a shared y range."""
    vals = [np.asarray(v, dtype=np.float64) for v in series.values()]
    if not vals or any(v.size == 0 for v in vals):
        raise ValueError("need at least one non-empty series")
    finite = np.concatenate([v[np.isfinite(v)] for v in vals])
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    img = np.zeros((height, width, 3), dtype=np.uint8)
    pad = 8
    img[height - pad, pad : width - pad] = 90
    img[pad : height - pad, pad] = 90
    for k, v in enumerate(vals):
        color = SERIES_COLORS[k % len(SERIES_COLORS)]
        n = v.size
        xs = [pad + (round(i * (width - 2 * pad - 1) / max(n - 1, 1))) for i in range(n)]
        ys = [
            height - pad - round((float(y) - lo) / (hi - lo) * (height - 2 * pad - 1)) if np.isfinite(y) else None
            for y in v
        ]
        pts = [(x, y) for x, y in zip(xs, ys) if y is not None]
        for (xa, ya), (xb, yb) in zip(pts, pts[1:]):
            _line(img, xa, ya, xb, yb, color)
        for x, y in pts:
            img[max(y - 1, 0) : y + 2, max(x - 1, 0) : x + 2] = color
    write_ppm(path, img)
    return img
