"""Patch-level heatmap overlays (attention, ground-truth maps, hidden-state norms)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dataset import Sample
from .geometry import PatchGrid
from .model import ToyVLM
from .raster import Image, write_png, write_ppm
from .supervision import Batch, extract_visual_attention

SOURCES = ("attention", "gt-map", "hidden-norm")

# dark purple -> blue -> teal -> green -> yellow
RAMP = np.array(
    [
        [68, 1, 84],
        [59, 82, 139],
        [33, 145, 140],
        [94, 201, 98],
        [253, 231, 37],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class HeatmapSpec:
    source: str = "attention"
    layer: int | str = "mean"  # layer index or "mean"
    alpha: float = 0.6
    output: str = ""

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.layer != "mean" and not isinstance(self.layer, int):
            raise ValueError(f"layer must be an index or 'mean', got {self.layer!r}")

    def check_layers(self, n_layers: int) -> None:
        if self.layer != "mean" and not 0 <= self.layer < n_layers:
            raise ValueError(f"layer {self.layer} out of range for a {n_layers}-layer model")


def normalize(values) -> np.ndarray:
    """Min-max to [0, 1]; a constant vector maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def ramp_colors(t: np.ndarray) -> np.ndarray:
    """Piecewise-linear lookup into the 5-stop ramp, t in [0, 1]."""
    pos = np.clip(t, 0.0, 1.0) * (len(RAMP) - 1)
    lo = np.minimum(pos.astype(int), len(RAMP) - 2)
    frac = (pos - lo)[:, None]
    return RAMP[lo] * (1 - frac) + RAMP[lo + 1] * frac


def render_overlay(image: Image, values, grid: PatchGrid, spec: HeatmapSpec = HeatmapSpec()) -> Image:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size != grid.size:
        raise ValueError(f"expected {grid.size} values, got {values.size}")
    if (image.width, image.height) != (grid.width, grid.height):
        raise ValueError("image and grid sizes differ")
    colors = ramp_colors(normalize(values)).reshape(grid.rows, grid.cols, 3)
    tint = np.repeat(np.repeat(colors, grid.patch, axis=0), grid.patch, axis=1)
    base = image.array().astype(np.float64)
    out = np.rint((1.0 - spec.alpha) * base + spec.alpha * tint)
    return Image.from_array(np.clip(out, 0, 255).astype(np.uint8))


def tinted_patches(values, threshold: float = 0.0) -> set[int]:
    """Patches whose normalised value exceeds ``threshold`` (i.e. above the lowest ramp colour)."""
    return set(np.flatnonzero(normalize(values) > threshold).tolist())


def top_patches(values, k: int) -> set[int]:
    order = np.argsort(-np.asarray(values), kind="stable")
    return set(order[:k].tolist())


def heatmap_values(model: ToyVLM | None, sample: Sample, spec: HeatmapSpec) -> np.ndarray:
    """Per-patch values for the requested source."""
    if spec.source == "gt-map":
        return sample.gt_array()
    if model is None:
        raise ValueError(f"source {spec.source!r} needs a model")
    spec.check_layers(model.cfg.layers)
    batch = Batch.from_samples([sample])
    with T.no_grad():
        out = model.forward(batch.inputs, batch.images, batch.visual_start)
    if spec.source == "hidden-norm":
        vs, vl = batch.visual_start, batch.visual_len
        return np.linalg.norm(out.hidden.data[0, vs : vs + vl], axis=-1)
    q = extract_visual_attention(out.attentions, batch.visual_start, batch.visual_len, batch.anchors).data[0]
    return q.mean(axis=0) if spec.layer == "mean" else q[spec.layer]


def save_image(image: Image, path) -> None:
    if str(path).lower().endswith(".png"):
        write_png(path, image)
    else:
        write_ppm(path, image)
