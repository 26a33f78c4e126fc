"""Grid granularities: the spatial resolution at which users disclose location.

A granularity partitions a bounded rectangular domain into `cols x rows` square
cells (granules) of edge `cell_edge`.  Cells are half-open `[lo, hi)`; the top
and right domain boundary folds into the last row/column so every point of the
domain belongs to exactly one granule.  Distance computations treat a granule
as its closed rectangle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class DomainError(ValueError):
    """Point lies outside the granularity's domain."""


class GranuleIndexError(ValueError):
    """Granule index out of range for the granularity."""


class Semantics(str, Enum):
    """Proximity semantics between a point and a granule.

    MIN_DIST: in proximity if the nearest point of the granule is within the
    threshold (no false negatives).  MAX_DIST: the whole granule must be within
    the threshold (no false positives).  MOSTLY: at least half the granule's
    area is within the threshold.
    """

    MIN_DIST = "min-dist"
    MAX_DIST = "max-dist"
    MOSTLY = "mostly"


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def distance_to(self, other: "Point") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class GridGranularity:
    origin_x: float
    origin_y: float
    cell_edge: float
    cols: int
    rows: int

    def __post_init__(self) -> None:
        if self.cell_edge <= 0:
            raise ValueError("cell_edge must be positive")
        if self.cols < 1 or self.rows < 1:
            raise ValueError("grid must have at least one column and row")

    @property
    def width(self) -> float:
        return self.cols * self.cell_edge

    @property
    def height(self) -> float:
        return self.rows * self.cell_edge

    @property
    def cell_count(self) -> int:
        return self.cols * self.rows

    def contains(self, p: Point) -> bool:
        return (
            0.0 <= p.x - self.origin_x <= self.width
            and 0.0 <= p.y - self.origin_y <= self.height
        )

    def granule_of(self, p: Point) -> int:
        """Index of the granule containing `p` (row-major, bottom-left is 0)."""
        if not self.contains(p):
            raise DomainError(f"point ({p.x}, {p.y}) outside domain")
        col = int((p.x - self.origin_x) // self.cell_edge)
        row = int((p.y - self.origin_y) // self.cell_edge)
        # fold the far boundary into the last row/column
        col = min(col, self.cols - 1)
        row = min(row, self.rows - 1)
        return row * self.cols + col

    def check_index(self, index: int) -> None:
        if not 0 <= index < self.cell_count:
            raise GranuleIndexError(f"granule index {index} out of range")

    def cell_bounds(self, index: int) -> tuple[float, float, float, float]:
        """Closed rectangle (x0, y0, x1, y1) of the granule."""
        self.check_index(index)
        row, col = divmod(index, self.cols)
        x0 = self.origin_x + col * self.cell_edge
        y0 = self.origin_y + row * self.cell_edge
        return x0, y0, x0 + self.cell_edge, y0 + self.cell_edge


def min_dist(p: Point, grid: GridGranularity, index: int) -> float:
    """Distance from `p` to the nearest point of the granule (0 if inside)."""
    x0, y0, x1, y1 = grid.cell_bounds(index)
    dx = max(x0 - p.x, 0.0, p.x - x1)
    dy = max(y0 - p.y, 0.0, p.y - y1)
    return math.hypot(dx, dy)


def max_dist(p: Point, grid: GridGranularity, index: int) -> float:
    """Distance from `p` to the farthest point (a corner) of the granule."""
    x0, y0, x1, y1 = grid.cell_bounds(index)
    dx = max(abs(x0 - p.x), abs(x1 - p.x))
    dy = max(abs(y0 - p.y), abs(y1 - p.y))
    return math.hypot(dx, dy)


def covered_fraction(
    p: Point, grid: GridGranularity, index: int, delta: float, n: int = 64
) -> float:
    """Fraction of the granule's area within distance `delta` of `p`.

    Deterministic n x n lattice subsampling at subcell centers; the result is
    exact to within one lattice step of the true area fraction.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if n < 1:
        raise ValueError("subsampling lattice must have at least one point")
    x0, y0, _, _ = grid.cell_bounds(index)
    step = grid.cell_edge / n
    xs = x0 + (np.arange(n) + 0.5) * step
    ys = y0 + (np.arange(n) + 0.5) * step
    dx = xs[:, None] - p.x
    dy = ys[None, :] - p.y
    return float((dx * dx + dy * dy <= delta * delta).mean())


def _semantics_match(
    p: Point, grid: GridGranularity, index: int, delta: float, semantics: Semantics
) -> bool:
    mn = min_dist(p, grid, index)
    if mn > delta:
        return False
    if semantics is Semantics.MIN_DIST:
        return True
    mx = max_dist(p, grid, index)
    if mx <= delta:
        return True
    if semantics is Semantics.MAX_DIST:
        return False
    return covered_fraction(p, grid, index, delta) >= 0.5


def in_proximity_of_granule(
    p: Point, grid: GridGranularity, index: int, delta: float, semantics: Semantics
) -> bool:
    """Decide proximity between a point and a disclosed granule."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    grid.check_index(index)
    return _semantics_match(p, grid, index, delta, semantics)


def proximity_candidates(
    p: Point, grid: GridGranularity, delta: float, semantics: Semantics
) -> frozenset[int]:
    """Granules a buddy could occupy and be considered in proximity of `p`.

    Inclusive comparisons throughout: a granule at distance exactly `delta`
    is a candidate.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    edge = grid.cell_edge
    lo_col = max(0, int(math.floor((p.x - delta - grid.origin_x) / edge)) - 1)
    hi_col = min(grid.cols - 1, int(math.floor((p.x + delta - grid.origin_x) / edge)) + 1)
    lo_row = max(0, int(math.floor((p.y - delta - grid.origin_y) / edge)) - 1)
    hi_row = min(grid.rows - 1, int(math.floor((p.y + delta - grid.origin_y) / edge)) + 1)
    out = []
    for row in range(lo_row, hi_row + 1):
        base = row * grid.cols
        for col in range(lo_col, hi_col + 1):
            index = base + col
            if _semantics_match(p, grid, index, delta, semantics):
                out.append(index)
    return frozenset(out)


def candidate_bound(grid: GridGranularity, delta: float) -> int:
    """Agreed upper bound on the candidate-set size for threshold `delta`.

    Closed form from the circle's bounding box, capped at the total number of
    granules (the true candidate count can never exceed either).
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    side = math.ceil(2.0 * delta / grid.cell_edge) + 2
    return min(side * side, grid.cell_count)


def max_travel_time(grid: GridGranularity, a: int, b: int, speed: float) -> float:
    """Worst-case time to travel between any two points of granules a and b."""
    if speed <= 0:
        raise ValueError("speed must be positive")
    ax0, ay0, ax1, ay1 = grid.cell_bounds(a)
    bx0, by0, bx1, by1 = grid.cell_bounds(b)
    worst = 0.0
    for ax, ay in ((ax0, ay0), (ax0, ay1), (ax1, ay0), (ax1, ay1)):
        for bx, by in ((bx0, by0), (bx0, by1), (bx1, by0), (bx1, by1)):
            worst = max(worst, math.hypot(ax - bx, ay - by))
    return worst / speed
