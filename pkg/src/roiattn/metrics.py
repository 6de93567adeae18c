"""COCO-style average precision (101-point interpolation) for box detections."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import iou_matrix

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class ImageDetections:
    boxes: np.ndarray  # n×4
    scores: np.ndarray  # n
    labels: np.ndarray  # n


@dataclass
class ImageGroundTruth:
    boxes: np.ndarray
    labels: np.ndarray


@dataclass
class APTable:
    thresholds: tuple[float, ...]
    per_class: dict[int, dict[float, float]]  # class -> threshold -> AP
    mean_per_threshold: dict[float, float] = field(default_factory=dict)

    @property
    def AP(self) -> float:
        vals = list(self.mean_per_threshold.values())
        return math.fsum(vals) / len(vals) if vals else 0.0

    @property
    def AP50(self) -> float:
        return self.mean_per_threshold.get(0.5, float("nan"))

    @property
    def AP75(self) -> float:
        return self.mean_per_threshold.get(0.75, float("nan"))


def match_detections(
    det_boxes: Sequence[np.ndarray], det_img: np.ndarray, gt_boxes: dict[int, np.ndarray], threshold: float
) -> np.ndarray:
    """Greedy matching of score-sorted detections; returns a TP flag per detection.

    Each detection takes the unmatched ground truth of highest IoU (ties -> lowest
    index) provided that IoU reaches ``threshold``.
    """
    matched = {img: np.zeros(len(b), dtype=bool) for img, b in gt_boxes.items()}
    tp = np.zeros(len(det_img), dtype=bool)
    for k, (box, img) in enumerate(zip(det_boxes, det_img)):
        gts = gt_boxes.get(int(img))
        if gts is None or not len(gts):
            continue
        ious = iou_matrix(box, gts)[0]
        ious[matched[int(img)]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= threshold:
            tp[k] = True
            matched[int(img)][best] = True
    return tp


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(tp), precision[np.minimum(idx, len(tp) - 1)], 0.0)
    return math.fsum(q.tolist()) / len(RECALL_POINTS)


def evaluate_map(
    detections: Sequence[ImageDetections],
    ground_truth: Sequence[ImageGroundTruth],
    iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
    num_classes: int | None = None,
) -> APTable:
    """Per-class AP at each IoU threshold plus class means.

    Classes without any ground truth are left out of the means.
    """
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection sets for {len(ground_truth)} images")
    thresholds = tuple(float(t) for t in iou_thresholds)
    if num_classes is None:
        seen = [g.labels for g in ground_truth] + [d.labels for d in detections]
        num_classes = int(max((int(x.max()) for x in seen if len(x)), default=-1)) + 1
    per_class: dict[int, dict[float, float]] = {}
    for c in range(num_classes):
        gt_c = {i: np.asarray(g.boxes)[np.asarray(g.labels) == c].reshape(-1, 4) for i, g in enumerate(ground_truth)}
        num_gt = sum(len(b) for b in gt_c.values())
        if num_gt == 0:
            continue
        boxes, scores, imgs = [], [], []
        for i, d in enumerate(detections):
            sel = np.asarray(d.labels) == c
            boxes.extend(np.asarray(d.boxes).reshape(-1, 4)[sel])
            scores.extend(np.asarray(d.scores)[sel])
            imgs.extend([i] * int(sel.sum()))
        order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
        boxes = [boxes[k] for k in order]
        imgs = np.asarray(imgs, dtype=np.int64)[order]
        per_class[c] = {t: interpolated_ap(match_detections(boxes, imgs, gt_c, t), num_gt) for t in thresholds}
    means = {}
    for t in thresholds:
        vals = [per_class[c][t] for c in per_class]
        means[t] = math.fsum(vals) / len(vals) if vals else 0.0
    return APTable(thresholds, per_class, means)
