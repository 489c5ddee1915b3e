"""Spatial activity heatmaps built from detection centres."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

# black -> blue -> green -> yellow -> red at 0, .25, .5, .75, 1
GRADIENT_STOPS = np.array(
    [[0, 0, 0], [0, 0, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]], dtype=np.float64
)


@dataclass(frozen=True, eq=False)
class HeatmapGrid:
    G: int
    bins: np.ndarray
    frames_seen: int = 0

    def __post_init__(self):
        if self.G < 1:
            raise ValueError(f"grid side must be positive, got {self.G}")
        bins = np.array(self.bins, dtype=np.float64)
        if bins.shape != (self.G, self.G):
            raise ValueError(f"bins must be {self.G}x{self.G}, got {bins.shape}")
        if np.any(bins < 0) or not np.all(np.isfinite(bins)):
            raise ValueError("heatmap bins must be finite and non-negative")
        bins.flags.writeable = False
        object.__setattr__(self, "bins", bins)

    @classmethod
    def empty(cls, G: int = 32):
        return cls(G, np.zeros((G, G)))

    @property
    def total(self):
        return float(self.bins.sum())

    def __eq__(self, other):
        if not isinstance(other, HeatmapGrid):
            return NotImplemented
        return (self.G == other.G and self.frames_seen == other.frames_seen
                and bool(np.array_equal(self.bins, other.bins)))

    def to_json(self):
        return {"G": self.G, "frames_seen": self.frames_seen,
                "bins": self.bins.reshape(-1).tolist()}

    @classmethod
    def from_json(cls, doc):
        G = int(doc["G"])
        return cls(G, np.asarray(doc["bins"], dtype=np.float64).reshape(G, G),
                   int(doc["frames_seen"]))


def _cell(v: float, G: int) -> int:
    return min(max(int(math.floor(v * G)), 0), G - 1)


def accumulate(grid: HeatmapGrid, detections) -> HeatmapGrid:
    """Add one frame's detections; each centre increments one bin."""
    bins = grid.bins.copy()
    for det in detections:
        cx, cy = det.bbox.center
        bins[_cell(cy, grid.G), _cell(cx, grid.G)] += 1.0
    return HeatmapGrid(grid.G, bins, grid.frames_seen + 1)


def merge(a: HeatmapGrid, b: HeatmapGrid) -> HeatmapGrid:
    if a.G != b.G:
        raise ValueError(f"cannot merge {a.G}x{a.G} grid with {b.G}x{b.G} grid")
    return HeatmapGrid(a.G, a.bins + b.bins, a.frames_seen + b.frames_seen)


def normalize(grid: HeatmapGrid) -> np.ndarray:
    peak = grid.bins.max()
    if peak <= 0.0:
        return np.zeros_like(grid.bins)
    return grid.bins / peak


def colorize(intensity) -> np.ndarray:
    """Map intensities in [0, 1] to 0..255 RGB on the five-stop gradient."""
    t = np.clip(np.asarray(intensity, dtype=np.float64), 0.0, 1.0) * 4.0
    lo = np.minimum(np.floor(t).astype(int), 3)
    frac = (t - lo)[..., None]
    rgb = GRADIENT_STOPS[lo] * (1.0 - frac) + GRADIENT_STOPS[lo + 1] * frac
    return np.floor(rgb + 0.5).astype(np.uint8)


def render_ppm(grid: HeatmapGrid, cell_px: int = 8) -> bytes:
    """Binary P6 image, ``G * cell_px`` pixels square."""
    if cell_px < 1:
        raise ValueError(f"cell_px must be >= 1, got {cell_px}")
    rgb = colorize(normalize(grid))
    image = np.repeat(np.repeat(rgb, cell_px, axis=0), cell_px, axis=1)
    side = grid.G * cell_px
    return b"P6 %d %d 255\n" % (side, side) + image.tobytes()


def dump_json(grid: HeatmapGrid) -> str:
    return json.dumps(grid.to_json())
