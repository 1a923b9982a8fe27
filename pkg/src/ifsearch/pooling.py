"""Image-wise and region-wise descriptor pooling from feature maps.

A raw descriptor aggregates one channel vector from a feature map, either
over the whole spatial grid (image-wise) or over a grid region obtained by
warping a pixel box onto the feature grid.  Sum pooling accumulates in
float64; max pooling takes the per-channel maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import DisjointBox, InvariantError
from .tensor_store import BoundingBox, FeatureMap, RegionProposal


class Pooling(str, Enum):
    SUM = "sum"
    MAX = "max"


class Scope(str, Enum):
    IMAGE = "image"
    REGION = "region"


@dataclass(frozen=True, eq=False)
class RawDescriptor:
    """Unnormalized channel vector pooled from a feature map."""

    values: np.ndarray
    pooling: Pooling
    scope: Scope

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise InvariantError("descriptor values must be a flat vector")
        if not np.isfinite(values).all():
            raise InvariantError("descriptor values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class GridRegion:
    """Half-open cell-index window ``[col_start, col_end) x [row_start, row_end)``."""

    col_start: int
    col_end: int
    row_start: int
    row_end: int

    def __post_init__(self):
        if self.col_start < 0 or self.row_start < 0:
            raise InvariantError(f"region starts must be non-negative: {self}")
        if self.col_start >= self.col_end or self.row_start >= self.row_end:
            raise InvariantError(f"region must span at least one cell: {self}")

    @property
    def num_cells(self) -> int:
        return (self.col_end - self.col_start) * (self.row_end - self.row_start)


def _pool(view: np.ndarray, pooling: Pooling) -> np.ndarray:
    if pooling == Pooling.SUM:
        return view.sum(axis=(1, 2), dtype=np.float64)
    return view.max(axis=(1, 2)).astype(np.float64)


def pool_image(fmap: FeatureMap, pooling: Pooling) -> RawDescriptor:
    """Aggregate every spatial cell into one channel vector."""
    return RawDescriptor(_pool(fmap.data, pooling), pooling, Scope.IMAGE)


def warp_box(box: BoundingBox, fmap: FeatureMap) -> GridRegion:
    """Map a pixel box onto the feature grid.

    Start edges round down and end edges round up, so the region always
    covers the pixel box; the result is clamped to the grid and widened to
    at least one cell per dimension.  Raises :class:`DisjointBox` when the
    box lies entirely outside the grid's image area.
    """
    stride = fmap.stride
    max_x = fmap.width * stride
    max_y = fmap.height * stride
    if box.x_min >= max_x or box.y_min >= max_y or box.x_max <= 0 or box.y_max <= 0:
        raise DisjointBox(
            f"box {box.coords} outside image area {max_x} x {max_y} "
            f"(grid {fmap.height} x {fmap.width}, stride {stride})"
        )

    def _axis(lo: float, hi: float, limit: int) -> tuple[int, int]:
        start = max(0, min(math.floor(lo / stride), limit))
        end = max(0, min(math.ceil(hi / stride), limit))
        if start >= end:
            # degenerate after clamping: widen to one cell, shifting left
            # when pinned at the far boundary
            if start >= limit:
                start = limit - 1
            end = start + 1
        return start, end

    col_start, col_end = _axis(box.x_min, box.x_max, fmap.width)
    row_start, row_end = _axis(box.y_min, box.y_max, fmap.height)
    return GridRegion(col_start, col_end, row_start, row_end)


def pool_region(fmap: FeatureMap, region: GridRegion, pooling: Pooling) -> RawDescriptor:
    """Aggregate the cells of one grid region into a channel vector.

    Pooling the full grid is identical to :func:`pool_image`.
    """
    if region.col_end > fmap.width or region.row_end > fmap.height:
        raise InvariantError(
            f"region {region} exceeds grid {fmap.height} x {fmap.width}"
        )
    view = fmap.data[:, region.row_start:region.row_end, region.col_start:region.col_end]
    return RawDescriptor(_pool(view, pooling), pooling, Scope.REGION)


def pool_all_proposals(
    fmap: FeatureMap,
    proposals: Sequence[RegionProposal],
    pooling: Pooling,
) -> tuple[list[RawDescriptor | None], list[int]]:
    """Pool every proposal's warped region; order preserved.

    Returns ``(descriptors, failed)`` where ``descriptors[i]`` is the
    result for ``proposals[i]`` or ``None`` when its box does not touch
    the feature grid, and ``failed`` lists those offending indices.
    """
    descriptors: list[RawDescriptor | None] = []
    failed: list[int] = []
    for i, proposal in enumerate(proposals):
        try:
            region = warp_box(proposal.box, fmap)
        except DisjointBox:
            descriptors.append(None)
            failed.append(i)
            continue
        descriptors.append(pool_region(fmap, region, pooling))
    return descriptors, failed
