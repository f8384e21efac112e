"""Dependency-free rendering of grids to binary PPM (P6) images."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Grid2D
from .errors import ConfigError

# anchor colours, interpolated linearly in RGB
COLORMAPS = {
    "gray": [(0, 0, 0), (255, 255, 255)],
    "seismic": [(0, 0, 77), (0, 0, 255), (255, 255, 255), (255, 0, 0), (128, 0, 0)],
    "viridis": [(68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)],
}


def normalize(values: np.ndarray, clip_percentiles=(2.0, 98.0)) -> np.ndarray:
    """Map to [0, 1] after clipping at the given percentiles.  A constant
    input maps to 0.5."""
    lo_p, hi_p = clip_percentiles
    if not 0.0 <= lo_p < hi_p <= 100.0:
        raise ConfigError(f"clip percentiles must satisfy 0 <= lo < hi <= 100, got {clip_percentiles}")
    lo, hi = np.percentile(values, [lo_p, hi_p])
    if not hi > lo:
        return np.full(values.shape, 0.5)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def apply_colormap(u: np.ndarray, colormap: str = "seismic") -> np.ndarray:
    """uint8 RGB image for unit-interval values."""
    if colormap not in COLORMAPS:
        raise ConfigError(f"unknown colormap {colormap!r}; choose from {sorted(COLORMAPS)}")
    anchors = np.asarray(COLORMAPS[colormap], dtype=np.float64)
    xs = np.linspace(0.0, 1.0, len(anchors))
    rgb = np.stack([np.interp(u, xs, anchors[:, c]) for c in range(3)], axis=-1)
    return np.rint(rgb).astype(np.uint8)


def render(grid: Grid2D, colormap: str = "seismic", clip_percentiles=(2.0, 98.0)) -> np.ndarray:
    """(n_samples, n_traces, 3) image: time runs down, traces run across."""
    return apply_colormap(normalize(grid.values.T, clip_percentiles), colormap)


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise ConfigError("not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def write_ppm(grid: Grid2D, path, colormap: str = "seismic", clip_percentiles=(2.0, 98.0)) -> None:
    Path(path).write_bytes(encode_ppm(render(grid, colormap, clip_percentiles)))
