import numpy as np
import pytest

from roiattn import reference
from roiattn.metrics import ImageDetections, ImageGroundTruth, evaluate_map


def gt(boxes, labels):
    return ImageGroundTruth(np.array(boxes, dtype=float).reshape(-1, 4), np.array(labels))


def det(boxes, scores, labels):
    return ImageDetections(np.array(boxes, dtype=float).reshape(-1, 4), np.array(scores, dtype=float), np.array(labels))


def test_perfect_detections():
    g = [gt([[0, 0, 10, 10], [20, 20, 40, 30]], [0, 1]), gt([[5, 5, 25, 25]], [0])]
    d = [det(x.boxes, np.ones(len(x.labels)), x.labels) for x in g]
    t = evaluate_map(d, g)
    assert t.AP == t.AP50 == t.AP75 == 1.0


def test_iou_06_counts_at_50_only():
    g = [gt([[0, 0, 10, 10]], [0])]
    # 10×6 overlap with a 10×10 box -> IoU 0.6
    d = [det([[0, 0, 10, 6]], [0.9], [0])]
    t = evaluate_map(d, g)
    assert t.AP50 == 1.0 and t.AP75 == 0.0


def test_three_detections_two_gt_hand_case():
    # ranked: TP (score .9), FP (.8), TP (.7)
    # PR points: (r .5, p 1), (r .5, p .5), (r 1, p 2/3)
    # interpolated: recall 0..0.5 -> 1.0 (51 points), 0.51..1.0 -> 2/3 (50 points)
    g = [gt([[0, 0, 10, 10], [50, 50, 60, 60]], [0, 0])]
    d = [det([[0, 0, 10, 10], [100, 100, 110, 110], [50, 50, 60, 60]], [0.9, 0.8, 0.7], [0, 0, 0])]
    expected = (51 * 1.0 + 50 * (2 / 3)) / 101
    t = evaluate_map(d, g, iou_thresholds=[0.5])
    assert t.AP50 == pytest.approx(expected, abs=1e-15)
    dets = [(0.9, 0, [0, 0, 10, 10]), (0.8, 0, [100, 100, 110, 110]), (0.7, 0, [50, 50, 60, 60])]
    assert reference.average_precision(dets, {0: [[0, 0, 10, 10], [50, 50, 60, 60]]}, 0.5) == pytest.approx(expected, abs=1e-15)


def test_class_without_gt_is_excluded():
    g = [gt([[0, 0, 10, 10]], [0])]
    d = [det([[0, 0, 10, 10], [30, 30, 40, 40]], [1.0, 0.9], [0, 3])]
    t = evaluate_map(d, g, num_classes=4)
    assert set(t.per_class) == {0}
    assert t.AP50 == 1.0


def test_duplicate_detection_is_false_positive():
    g = [gt([[0, 0, 10, 10]], [0])]
    d = [det([[0, 0, 10, 10], [0, 0, 10, 10]], [0.9, 0.95], [0, 0])]
    assert evaluate_map(d, g).AP50 == 1.0
    d = [det([[0, 0, 10, 10], [30, 0, 40, 10]], [0.5, 0.95], [0, 0])]
    # FP ranked first: the only PR point is (recall 1, precision 0.5)
    assert evaluate_map(d, g).AP50 == pytest.approx(0.5)


def _random_instance(rng):
    n_img = int(rng.integers(1, 4))
    gts, dets = [], []
    for _ in range(n_img):
        ng, nd = int(rng.integers(0, 5)), int(rng.integers(0, 6))
        gb = rng.uniform(0, 40, (ng, 2))
        gboxes = np.hstack([gb, gb + rng.uniform(4, 20, (ng, 2))])
        glab = rng.integers(0, 2, ng)
        src = gboxes[rng.integers(0, ng, nd)] if ng else rng.uniform(0, 40, (nd, 4))
        dboxes = src + rng.normal(0, 2.5, (nd, 4))
        dboxes[:, 2:] = np.maximum(dboxes[:, 2:], dboxes[:, :2] + 1)
        dscores = np.round(rng.uniform(0, 1, nd), 1)  # coarse scores create ties
        dlab = rng.integers(0, 2, nd)
        gts.append(gt(gboxes, glab))
        dets.append(det(dboxes, dscores, dlab))
    return dets, gts


@pytest.mark.parametrize("trial", range(60))
def test_matches_brute_force_oracle(trial):
    rng = np.random.default_rng(trial)
    dets, gts = _random_instance(rng)
    table = evaluate_map(dets, gts, num_classes=2)
    for c in range(2):
        gmap = {i: g.boxes[g.labels == c].tolist() for i, g in enumerate(gts)}
        if sum(len(v) for v in gmap.values()) == 0:
            assert c not in table.per_class
            continue
        flat = [
            (float(s), i, b.tolist())
            for i, d in enumerate(dets)
            for b, s, l in zip(d.boxes, d.scores, d.labels)
            if l == c
        ]
        for t in table.thresholds:
            assert table.per_class[c][t] == reference.average_precision(flat, gmap, t)
