"""Loop-based scalar reference implementations.

Nothing here touches the tape or the vectorized code paths; these exist only
to cross-check them on small instances.
"""

from __future__ import annotations

import math


def matmul(a, b):
    m, k, n = len(a), len(b), len(b[0])
    if len(a[0]) != k:
        raise ValueError("inner extents differ")
    return [[sum(float(a[i][p]) * float(b[p][j]) for p in range(k)) for j in range(n)] for i in range(m)]


def double_normalize(scores, eps=1e-9):
    s, d = len(scores), len(scores[0])
    out = [[0.0] * d for _ in range(s)]
    for j in range(d):
        col = [float(scores[i][j]) for i in range(s)]
        top = max(col)
        ex = [math.exp(v - top) for v in col]
        tot = sum(ex)
        for i in range(s):
            out[i][j] = ex[i] / tot
    for i in range(s):
        tot = sum(out[i]) + eps
        out[i] = [v / tot for v in out[i]]
    return out


def attention_forward(x, mem_key, mem_value, eps=1e-9):
    """x: s×L, memories: d×L (nested lists or arrays)."""
    s, L, d = len(x), len(x[0]), len(mem_key)
    scores = [[sum(float(x[i][l]) * float(mem_key[j][l]) for l in range(L)) for j in range(d)] for i in range(s)]
    attn = double_normalize(scores, eps)
    return [
        [sum(attn[i][j] * float(mem_value[j][l]) for j in range(d)) + float(x[i][l]) for l in range(L)]
        for i in range(s)
    ]


def encode(x, weight, bias):
    """Positional encoding on C×H×W: concat col/W and row/H channels, then a 1×1 conv (weight C×(C+2))."""
    C, H, W = len(x), len(x[0]), len(x[0][0])
    out = [[[0.0] * W for _ in range(H)] for _ in range(C)]
    for o in range(C):
        for r in range(H):
            for c in range(W):
                acc = float(bias[o])
                for ch in range(C):
                    acc += float(weight[o][ch]) * float(x[ch][r][c])
                acc += float(weight[o][C]) * (c / W)
                acc += float(weight[o][C + 1]) * (r / H)
                out[o][r][c] = acc
    return out


def bilinear(plane, y, x):
    """Sample a H×W plane at continuous cell-center coordinates, clamped to the grid."""
    H, W = len(plane), len(plane[0])
    y = min(max(y, 0.0), H - 1.0)
    x = min(max(x, 0.0), W - 1.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
    ly, lx = y - y0, x - x0
    return (
        (1 - ly) * (1 - lx) * plane[y0][x0]
        + (1 - ly) * lx * plane[y0][x1]
        + ly * (1 - lx) * plane[y1][x0]
        + ly * lx * plane[y1][x1]
    )


def roi_align(features, box, out_h, out_w, spatial_scale, sampling):
    """features: C×H×W nested; box (x1, y1, x2, y2) in image pixels."""
    x1, y1, x2, y2 = (v * spatial_scale for v in box)
    bin_h, bin_w = (y2 - y1) / out_h, (x2 - x1) / out_w
    out = []
    for plane in features:
        rows = []
        for a in range(out_h):
            row = []
            for b in range(out_w):
                acc = 0.0
                for sy in range(sampling):
                    for sx in range(sampling):
                        yy = y1 + (a + (sy + 0.5) / sampling) * bin_h - 0.5
                        xx = x1 + (b + (sx + 0.5) / sampling) * bin_w - 0.5
                        acc += bilinear(plane, yy, xx)
                row.append(acc / sampling**2)
            rows.append(row)
        out.append(rows)
    return out


def box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _prefix_true_positives(dets, gts, threshold):
    """Greedy matching of the first len(dets) score-ordered detections; returns TP count."""
    used = {img: [False] * len(boxes) for img, boxes in gts.items()}
    tp = 0
    for img, box in dets:
        best, best_iou = -1, -1.0
        for g, gbox in enumerate(gts.get(img, [])):
            if used[img][g]:
                continue
            v = box_iou(box, gbox)
            if v > best_iou:
                best, best_iou = g, v
        if best >= 0 and best_iou >= threshold:
            used[img][best] = True
            tp += 1
    return tp


def average_precision(dets, gts, threshold):
    """dets: list of (score, image, box) for one class; gts: {image: [box, ...]}.

    Enumerates every score-ordered prefix, re-matches it from scratch, and takes
    for each of 101 recall levels the best precision among prefixes reaching it.
    """
    num_gt = sum(len(v) for v in gts.values())
    order = sorted(range(len(dets)), key=lambda k: (-dets[k][0], k))
    ranked = [(dets[k][1], dets[k][2]) for k in order]
    points = []
    for n in range(1, len(ranked) + 1):
        tp = _prefix_true_positives(ranked[:n], gts, threshold)
        points.append((tp / num_gt, tp / n))
    total = []
    for i in range(101):
        r = i / 100
        cands = [p for rec, p in points if rec >= r]
        total.append(max(cands) if cands else 0.0)
    return math.fsum(total) / 101
