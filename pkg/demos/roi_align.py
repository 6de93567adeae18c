"""
RoIAlign and the dual crop
==========================

Bilinear sampling on a fixed grid inside each box. The classification branch
crops the box itself, the regression branch a copy enlarged about its center.
"""

import numpy as np

from roiattn import reference
from roiattn.roi import BoxXYXY, RoiGrid, extract_dual, roi_align, scale_box
from roiattn.tensor import Tensor

rng = np.random.default_rng(0)
features = Tensor(rng.normal(size=(4, 16, 16)))  # stride-8 map of a 128 x 128 image
grid = RoiGrid()  # 7 x 7 bins, 2 x 2 samples per bin, spatial scale 1/8
box = BoxXYXY(20.0, 30.0, 70.0, 90.0)

crop = roi_align(features, box, grid)
print("crop", crop.shape)

# the vectorized path agrees with a loop-by-loop scalar version
want = np.array(reference.roi_align(features.values.tolist(), (20, 30, 70, 90), 7, 7, 1 / 8, 2))
print("max abs difference vs scalar loops:", float(np.abs(crop.values - want).max()))

print("scaled by 1.3:", scale_box(box, 1.3, 128, 128))
print("near a border the scaled box is clipped:", scale_box(BoxXYXY(0, 0, 20, 20), 1.3, 128, 128))

cls_rois, reg_rois = extract_dual(features, features, [box, BoxXYXY(5, 5, 30, 40)], grid, reg_scale=1.3)
print("cls", cls_rois.shape, "reg", reg_rois.shape)
