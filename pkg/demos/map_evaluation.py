"""
COCO-style mean average precision
=================================

Greedy score-ordered matching, 101-point interpolated precision, averaged over
IoU thresholds 0.50:0.05:0.95.
"""

import numpy as np

from roiattn.metrics import ImageDetections, ImageGroundTruth, evaluate_map

gt = [ImageGroundTruth(np.array([[0, 0, 10, 10], [50, 50, 60, 60]], float), np.array([0, 0]))]

# a hit, a false positive, then a second hit
dets = [
    ImageDetections(
        np.array([[0, 0, 10, 10], [100, 100, 110, 110], [50, 50, 60, 60]], float),
        np.array([0.9, 0.8, 0.7]),
        np.array([0, 0, 0]),
    )
]
table = evaluate_map(dets, gt)
print(f"AP {table.AP:.4f}  AP50 {table.AP50:.4f}  AP75 {table.AP75:.4f}")
print("by hand:", (51 * 1.0 + 50 * 2 / 3) / 101)

# a box at IoU 0.6 counts at 0.5 but not at 0.75
table = evaluate_map([ImageDetections(np.array([[0, 0, 10, 6]], float), np.array([1.0]), np.array([0]))], gt[:1])
print(f"IoU 0.6 box: AP50 {table.AP50:.3f}  AP75 {table.AP75:.3f}")
