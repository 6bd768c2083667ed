"""Ground-truth attention maps over the patch grid.

A map is the indicator of the target patches, spread with a truncated
Gaussian, given a uniform background floor and normalised to sum to one.
Overlapping Gaussians combine by maximum, so every target patch keeps the
top value and the argmax always lands on a target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import PatchGrid, Point, Polyline, point_to_patch, trace_polyline_patches


@dataclass(frozen=True)
class Smoothing:
    sigma: float = 1.0  # in patches; 0 disables spreading
    radius: int = 2  # square truncation window, in patches
    background: float = 0.05  # total floor mass before renormalising


DEFAULT_SMOOTHING = Smoothing()
LIGHT_SMOOTHING = Smoothing(sigma=0.75, radius=1, background=0.05)


@dataclass(frozen=True)
class GroundTruthAttentionMap:
    values: np.ndarray  # length grid.size
    grid: PatchGrid
    smoothing: Smoothing
    targets: tuple[int, ...]

    def as_grid(self) -> np.ndarray:
        return self.values.reshape(self.grid.rows, self.grid.cols)


def spread(targets, grid: PatchGrid, smoothing: Smoothing) -> np.ndarray:
    """Max-combined truncated Gaussian bumps, 1.0 on every target."""
    out = np.zeros((grid.rows, grid.cols))
    r = smoothing.radius if smoothing.sigma > 0 else 0
    for idx in targets:
        tr, tc = grid.cell(idx)
        for dr in range(-r, r + 1):
            for dc in range(-r, r + 1):
                rr, cc = tr + dr, tc + dc
                if 0 <= rr < grid.rows and 0 <= cc < grid.cols:
                    w = np.exp(-(dr * dr + dc * dc) / (2 * smoothing.sigma**2)) if (dr or dc) else 1.0
                    out[rr, cc] = max(out[rr, cc], w)
    return out.reshape(-1)


def build_gt_map(targets, grid: PatchGrid, smoothing: Smoothing = DEFAULT_SMOOTHING) -> GroundTruthAttentionMap:
    targets = tuple(sorted(set(int(t) for t in targets)))
    if not targets:
        raise ValueError("target patch set is empty")
    for t in targets:
        grid.cell(t)  # range check
    s = spread(targets, grid, smoothing)
    values = (s / s.sum() + smoothing.background / grid.size) / (1.0 + smoothing.background)
    values /= values.sum()
    return GroundTruthAttentionMap(values, grid, smoothing, targets)


def gt_from_point(pt: Point, grid: PatchGrid, smoothing: Smoothing = LIGHT_SMOOTHING) -> GroundTruthAttentionMap:
    return build_gt_map({point_to_patch(pt, grid)}, grid, smoothing)


def bbox_center_line(bbox: tuple[float, float, float, float]) -> Polyline:
    """Horizontal center line for boxes at least as wide as tall, else vertical.

    Boxes are half-open, so the far end stops just short of x1 (or y1).
    """
    x0, y0, x1, y1 = bbox
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise ValueError(f"box {bbox} has no area")
    if w >= h:
        yc = (y0 + y1) / 2
        return Polyline(((x0, yc), (math.nextafter(x1, x0), yc)))
    xc = (x0 + x1) / 2
    return Polyline(((xc, y0), (xc, math.nextafter(y1, y0))))


def gt_from_bbox(bbox, grid: PatchGrid, smoothing: Smoothing = DEFAULT_SMOOTHING) -> GroundTruthAttentionMap:
    x0, y0, x1, y1 = bbox
    if not (0 <= x0 and 0 <= y0 and x1 <= grid.width and y1 <= grid.height):
        raise ValueError(f"box {bbox} outside the image")
    line = bbox_center_line(bbox)
    return build_gt_map(trace_polyline_patches(line, grid), grid, smoothing)
