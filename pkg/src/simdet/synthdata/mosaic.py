"""Four-image mosaic augmentation with annotation remapping.

A pivot splits the canvas into four quadrants (top-left, top-right,
bottom-left, bottom-right). Each source image is scaled, keeping its aspect
ratio, until it covers its quadrant, and placed with its inner corner on the
pivot; whatever falls outside the quadrant is cropped. Boxes follow the same
affine map, are clipped to the quadrant, and are dropped when less than
``drop_fraction`` of their mapped area survives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from simdet.errors import InvalidInputError
from simdet.geometry import BBox
from simdet.rng import SplitMix, derive
from simdet.synthdata.scene import Scene

DROP_FRACTION = 0.2
PIVOT_RANGE = (0.25, 0.75)


@dataclass(frozen=True)
class QuadrantMap:
    """``out = offset + scale * src`` in normalized coordinates, restricted to ``region``."""

    offset: tuple[float, float]
    scale: tuple[float, float]
    region: tuple[float, float, float, float]  # x1, y1, x2, y2

    def forward(self, x: float, y: float) -> tuple[float, float]:
        return self.offset[0] + self.scale[0] * x, self.offset[1] + self.scale[1] * y

    def inverse(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.offset[0]) / self.scale[0], (y - self.offset[1]) / self.scale[1]

    def source_region(self) -> tuple[float, float, float, float]:
        x1, y1 = self.inverse(self.region[0], self.region[1])
        x2, y2 = self.inverse(self.region[2], self.region[3])
        return x1, y1, x2, y2


def draw_pivot(seed: int) -> tuple[float, float]:
    px, py = SplitMix(derive(seed, 0x4D)).uniform(*PIVOT_RANGE, size=2)
    return float(px), float(py)


def mosaic_layout(
    pivot: tuple[float, float],
    source_sizes: Sequence[tuple[int, int]],
    output_size: tuple[int, int],
) -> list[QuadrantMap]:
    """Affine maps for the four quadrants; ``source_sizes`` are ``(H, W)`` pairs."""
    px, py = pivot
    H, W = output_size
    regions = [(0.0, 0.0, px, py), (px, 0.0, 1.0, py), (0.0, py, px, 1.0), (px, py, 1.0, 1.0)]
    maps = []
    for q, ((hs, ws), reg) in enumerate(zip(source_sizes, regions)):
        qw, qh = reg[2] - reg[0], reg[3] - reg[1]
        k = max(qw * W / ws, qh * H / hs)  # output pixels per source pixel
        sx, sy = k * ws / W, k * hs / H
        ox = px - sx if q in (0, 2) else px
        oy = py - sy if q in (0, 1) else py
        maps.append(QuadrantMap((ox, oy), (sx, sy), reg))
    return maps


def remap_box(box: BBox, qmap: QuadrantMap, drop_fraction: float = DROP_FRACTION) -> BBox | None:
    x1, y1, x2, y2 = box.corners()
    mx1, my1 = qmap.forward(x1, y1)
    mx2, my2 = qmap.forward(x2, y2)
    rx1, ry1, rx2, ry2 = qmap.region
    cx1, cy1 = max(mx1, rx1), max(my1, ry1)
    cx2, cy2 = min(mx2, rx2), min(my2, ry2)
    if cx2 <= cx1 or cy2 <= cy1:
        return None
    mapped_area = (mx2 - mx1) * (my2 - my1)
    if (cx2 - cx1) * (cy2 - cy1) < drop_fraction * mapped_area:
        return None
    return BBox.from_corners(cx1, cy1, cx2, cy2)


def mosaic(
    scenes: Sequence[Scene],
    seed: int,
    output_size: tuple[int, int] = (64, 64),
    pivot: tuple[float, float] | None = None,
    drop_fraction: float = DROP_FRACTION,
) -> Scene:
    if len(scenes) != 4:
        raise InvalidInputError(f"mosaic needs exactly 4 scenes, got {len(scenes)}")
    H, W = output_size
    if pivot is None:
        pivot = draw_pivot(seed)
    maps = mosaic_layout(pivot, [s.image.shape[:2] for s in scenes], output_size)

    canvas = np.zeros((H, W, 3), dtype=np.float32)
    ys = (np.arange(H) + 0.5) / H
    xs = (np.arange(W) + 0.5) / W
    annotations: list[tuple[int, BBox]] = []
    provenance: list[tuple[int, int]] = []
    for q, (scene, qmap) in enumerate(zip(scenes, maps)):
        rx1, ry1, rx2, ry2 = qmap.region
        rows = np.flatnonzero((ys >= ry1) & (ys < ry2))
        cols = np.flatnonzero((xs >= rx1) & (xs < rx2))
        if rows.size and cols.size:
            hs, ws = scene.image.shape[:2]
            u, v = qmap.inverse(xs[cols], ys[rows])
            src_c = np.clip(np.floor(u * ws).astype(int), 0, ws - 1)
            src_r = np.clip(np.floor(v * hs).astype(int), 0, hs - 1)
            canvas[np.ix_(rows, cols)] = scene.image[np.ix_(src_r, src_c)]
        for j, (cls, box) in enumerate(scene.annotations):
            mapped = remap_box(box, qmap, drop_fraction)
            if mapped is not None:
                annotations.append((cls, mapped))
                provenance.append((q, j))
    return Scene(
        image=canvas,
        annotations=annotations,
        seed=seed,
        meta={"pivot": tuple(pivot), "maps": maps, "provenance": provenance},
    )
