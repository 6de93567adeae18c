"""RoIAlign crops with per-branch box scaling.

Boxes are continuous, half-open ``[x1, x2) × [y1, y2)`` in image pixels. A
feature cell ``(i, j)`` at stride ``1/spatial_scale`` has its center at
feature coordinate ``(i + 0.5, j + 0.5)``; sampling subtracts that half-cell
offset before bilinear interpolation, with sample positions clamped to the
valid cell-center range.

Because bilinear sampling is linear in the features, every crop is expressed
as an interpolation matrix applied to the flattened H·W map. That matrix is
the whole forward and, transposed, the whole backward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BoxXYXY:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def is_valid(self) -> bool:
        return bool(np.isfinite(self.as_array()).all() and self.x2 > self.x1 and self.y2 > self.y1)


@dataclass(frozen=True)
class RoiGrid:
    out_h: int = 7
    out_w: int = 7
    spatial_scale: float = 1.0 / 8
    sampling: int = 2

    def __post_init__(self):
        if self.out_h < 1 or self.out_w < 1 or self.sampling < 1:
            raise ValueError(f"invalid RoI grid {self}")


def clip_box(b: BoxXYXY, image_w: float, image_h: float) -> BoxXYXY:
    return BoxXYXY(
        min(max(b.x1, 0.0), image_w),
        min(max(b.y1, 0.0), image_h),
        min(max(b.x2, 0.0), image_w),
        min(max(b.y2, 0.0), image_h),
    )


def scale_box(b: BoxXYXY, factor: float, image_w: float, image_h: float) -> BoxXYXY:
    """Scale about the box center, then clip to the image."""
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    if factor == 1.0:
        return clip_box(b, image_w, image_h)
    cx, cy = (b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2
    hw, hh = b.width * factor / 2, b.height * factor / 2
    return clip_box(BoxXYXY(cx - hw, cy - hh, cx + hw, cy + hh), image_w, image_h)


def _axis_weights(lo: float, hi: float, bins: int, sampling: int, size: int) -> np.ndarray:
    """bins × size matrix: row k averages the bilinear weights of the samples in bin k."""
    step = (hi - lo) / bins
    k = np.arange(bins)[:, None]
    t = (np.arange(sampling)[None, :] + 0.5) / sampling
    pos = lo + (k + t) * step - 0.5  # to cell-center coordinates
    pos = np.clip(pos, 0.0, size - 1)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, size - 1)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = pos - i0
    W = np.zeros((bins, size))
    rows = np.broadcast_to(k, pos.shape)
    np.add.at(W, (rows, i0), (1.0 - frac) / sampling)
    np.add.at(W, (rows, i1), frac / sampling)
    return W


def interpolation_matrix(box: BoxXYXY, grid: RoiGrid, H: int, W: int) -> np.ndarray:
    """(out_h·out_w) × (H·W) matrix mapping a flattened feature plane to one RoI crop."""
    if not box.is_valid():
        raise DegenerateBoxError(f"degenerate RoI box {box}")
    s = grid.spatial_scale
    wy = _axis_weights(box.y1 * s, box.y2 * s, grid.out_h, grid.sampling, H)
    wx = _axis_weights(box.x1 * s, box.x2 * s, grid.out_w, grid.sampling, W)
    # separable: out[a, b] = sum_ij wy[a, i] wx[b, j] f[i, j]
    return np.einsum("ai,bj->abij", wy, wx).reshape(grid.out_h * grid.out_w, H * W)


def roi_align_many(features: Tensor, boxes: Sequence[BoxXYXY], grid: RoiGrid) -> Tensor:
    """Crop every box from a C×H×W map; returns s×C×out_h×out_w."""
    if features.ndim != 3:
        raise DimensionError(f"roi_align expects C×H×W features, got {features.shape}")
    C, H, W = features.shape
    s = len(boxes)
    hw = grid.out_h * grid.out_w
    if s == 0:
        return Tensor(np.zeros((0, C, grid.out_h, grid.out_w), dtype=features.dtype), dtype=features.dtype)
    M = np.concatenate([interpolation_matrix(b, grid, H, W) for b in boxes]).astype(features.dtype)
    flat = features.values.reshape(C, H * W)
    out = (flat @ M.T).reshape(C, s, grid.out_h, grid.out_w).transpose(1, 0, 2, 3)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(C, s * hw)
        return (g2 @ M).reshape(C, H, W),

    return T._make(np.ascontiguousarray(out), (features,), backward, "roi_align")


def roi_align(features: Tensor, box: BoxXYXY, grid: RoiGrid) -> Tensor:
    """Single-box crop: C×out_h×out_w."""
    out = roi_align_many(features, [box], grid)
    return T.reshape(out, out.shape[1:])


def extract_dual(
    features_cls: Tensor,
    features_reg: Tensor,
    boxes: Sequence[BoxXYXY],
    grid: RoiGrid,
    reg_scale: float = 1.3,
    image_size: tuple[float, float] | None = None,
) -> tuple[Tensor, Tensor]:
    """Classification crops at factor 1 and regression crops at ``reg_scale``.

    ``image_size`` is ``(width, height)`` in pixels; by default it is inferred
    from the feature map extents and the grid's spatial scale.
    """
    if features_cls.shape != features_reg.shape:
        raise DimensionError(
            f"classification and regression feature maps differ: {features_cls.shape} vs {features_reg.shape}"
        )
    if image_size is None:
        _, H, W = features_cls.shape
        image_size = (W / grid.spatial_scale, H / grid.spatial_scale)
    iw, ih = image_size
    cls_boxes = [scale_box(b, 1.0, iw, ih) for b in boxes]
    reg_boxes = [scale_box(b, reg_scale, iw, ih) for b in boxes]
    return roi_align_many(features_cls, cls_boxes, grid), roi_align_many(features_reg, reg_boxes, grid)
