"""Binary occupancy maps and heading-aligned crops for map conditioning."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import InputError


@dataclass
class OccupancyMap:
    """Grid of 0 (free) / 1 (occupied) cells.

    grid[row, col] covers y = origin_y + row * res, x = origin_x + col * res.
    """

    origin: tuple[float, float]
    resolution: float
    grid: np.ndarray

    def crop(self, center: np.ndarray, heading: float, cells: int = 64, resolution: float = 0.25) -> np.ndarray:
        """(cells, cells) crop centred on `center`, rows along the heading, outside the map counted as occupied."""
        if cells < 1 or resolution <= 0:
            raise InputError("Crop size and resolution must be positive")
        offsets = (np.arange(cells) - cells / 2.0 + 0.5) * resolution
        ahead, left = np.meshgrid(offsets, offsets, indexing="ij")
        cos_h, sin_h = math.cos(heading), math.sin(heading)
        wx = center[0] + ahead * cos_h - left * sin_h
        wy = center[1] + ahead * sin_h + left * cos_h
        rows = (wy - self.origin[1]) / self.resolution
        cols = (wx - self.origin[0]) / self.resolution
        sampled = map_coordinates(self.grid.astype(np.float64), [rows, cols], order=0, mode="constant", cval=1.0)
        return (sampled > 0.5).astype(np.float64)


def road_map(x_min: float, x_max: float, y_low: float, y_high: float, resolution: float = 0.25) -> OccupancyMap:
    """Straight road along x: free between y_low and y_high, occupied elsewhere."""
    margin = 20.0
    origin = (x_min - margin, y_low - margin)
    cols = int(math.ceil((x_max - x_min + 2 * margin) / resolution))
    rows = int(math.ceil((y_high - y_low + 2 * margin) / resolution))
    ys = origin[1] + (np.arange(rows) + 0.5) * resolution
    grid = np.repeat(((ys < y_low) | (ys > y_high))[:, None], cols, axis=1)
    return OccupancyMap(origin, resolution, grid.astype(np.uint8))


def plaza_map(half_size: float, resolution: float = 0.25, wall: float = 2.0) -> OccupancyMap:
    """Open square plaza bounded by walls."""
    extent = half_size + wall
    n = int(math.ceil(2 * extent / resolution))
    centers = -extent + (np.arange(n) + 0.5) * resolution
    inside = np.abs(centers) <= half_size
    grid = ~(inside[:, None] & inside[None, :])
    return OccupancyMap((-extent, -extent), resolution, grid.astype(np.uint8))


def map_for_layout(kind: str, params: dict[str, Any], x_min: float, x_max: float) -> OccupancyMap:
    """Occupancy map matching the layout a generator simulates, covering x_min..x_max on roads."""
    if kind == "traffic_weave":
        lane = float(params.get("lane_width", 3.5))
        return road_map(x_min, x_max, -lane / 2.0, 1.5 * lane)
    if kind == "idm_string":
        return road_map(x_min, x_max, -1.75, 1.75)
    return plaza_map(float(params.get("arena", 6.0)) + 2.0)


def heading_of(state: np.ndarray) -> float:
    """Recorded heading when available, else the velocity direction (0 when stationary)."""
    heading = state[4] if len(state) > 4 else math.nan
    if np.isfinite(heading):
        return float(heading)
    return math.atan2(state[3], state[2]) if (state[2] or state[3]) else 0.0
