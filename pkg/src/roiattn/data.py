"""Synthetic four-class shape scenes, jittered-GT proposals and box coding."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .roi import BoxXYXY

IMAGE_SIZE = 128
NUM_CLASSES = 4
CLASS_NAMES = ("disc", "ring", "star", "ellipse")
BACKGROUND = NUM_CLASSES  # background label is the last index


@dataclass(frozen=True)
class SceneObject:
    label: int
    box: BoxXYXY


@dataclass
class SyntheticScene:
    image: np.ndarray  # 3×H×W float32 in [0, 1]
    objects: list[SceneObject]
    seed: int

    @property
    def boxes(self) -> np.ndarray:
        return np.array([o.box.as_array() for o in self.objects]).reshape(-1, 4)

    @property
    def labels(self) -> np.ndarray:
        return np.array([o.label for o in self.objects], dtype=np.int64)


# ---------------------------------------------------------------- geometry


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of N×4 and M×4 xyxy boxes (continuous, half-open)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a: BoxXYXY, b: BoxXYXY) -> float:
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


def encode_deltas(proposals: np.ndarray, gt: np.ndarray, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """(dx, dy, dw, dh) = ((cx*-cx)/w, (cy*-cy)/h, ln(w*/w), ln(h*/h)), times ``weights``."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    pcx, pcy = p[:, 0] + 0.5 * pw, p[:, 1] + 0.5 * ph
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    gcx, gcy = g[:, 0] + 0.5 * gw, g[:, 1] + 0.5 * gh
    wx, wy, ww, wh = weights
    return np.stack(
        [wx * (gcx - pcx) / pw, wy * (gcy - pcy) / ph, ww * np.log(gw / pw), wh * np.log(gh / ph)], axis=1
    )


# keeps exp() finite for wild predictions
_MAX_LOG_SCALE = np.log(1000.0 / 16)


def decode_deltas(deltas: np.ndarray, proposals: np.ndarray, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    wx, wy, ww, wh = weights
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    pcx, pcy = p[:, 0] + 0.5 * pw, p[:, 1] + 0.5 * ph
    dw = np.minimum(d[:, 2] / ww, _MAX_LOG_SCALE)
    dh = np.minimum(d[:, 3] / wh, _MAX_LOG_SCALE)
    cx, cy = pcx + d[:, 0] / wx * pw, pcy + d[:, 1] / wy * ph
    w, h = pw * np.exp(dw), ph * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


# ---------------------------------------------------------------- scene generation


def _shape_mask(label: int, cx: float, cy: float, r: float, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    if label == 0:  # disc
        return dx**2 + dy**2 <= r**2
    if label == 1:  # ring
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if label == 2:  # five-pointed star, radius piecewise-linear in angle
        phase = rng.uniform(0, 2 * np.pi)
        theta = (np.arctan2(dy, dx) + phase) % (2 * np.pi / 5)
        tri = np.abs(theta / (2 * np.pi / 5) * 2 - 1)  # 1 at tips, 0 between
        bound = r * (0.4 + 0.6 * tri)
        return np.hypot(dx, dy) <= bound
    # ellipse, clearly non-circular
    ang = rng.uniform(0, np.pi)
    minor = r * rng.uniform(0.4, 0.6)
    c, s = np.cos(ang), np.sin(ang)
    u, v = c * dx + s * dy, -s * dx + c * dy
    return (u / r) ** 2 + (v / minor) ** 2 <= 1.0


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.05, 0.4, (3, size // 16, size // 16))
    img = np.kron(coarse, np.ones((16, 16)))
    img += rng.normal(0.0, 0.04, (3, size, size))
    return img


def generate_scene(seed: int, size: int = IMAGE_SIZE, min_objects: int = 1, max_objects: int = 6) -> SyntheticScene:
    """Deterministic scene: 1-6 non-crowding shapes, one archetype per class, on textured noise."""
    rng = np.random.default_rng(seed)
    img = _background(rng, size)
    n = int(rng.integers(min_objects, max_objects + 1))
    objects: list[SceneObject] = []
    placed = np.zeros((0, 4))
    for _ in range(n):
        for _attempt in range(50):
            label = int(rng.integers(0, NUM_CLASSES))
            r = rng.uniform(9.0, 24.0)
            cx = rng.uniform(r + 1, size - r - 1)
            cy = rng.uniform(r + 1, size - r - 1)
            mask = _shape_mask(label, cx, cy, r, rng, size)
            if mask.sum() < 20:
                continue
            ys, xs = np.nonzero(mask)
            box = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)
            if len(placed) and iou_matrix(box, placed).max() > 0.1:
                continue
            color = rng.uniform(0.55, 1.0, 3)
            color[rng.integers(0, 3)] *= rng.uniform(0.2, 0.7)
            img[:, mask] = color[:, None]
            placed = np.vstack([placed, box])
            objects.append(SceneObject(label, BoxXYXY(*box.tolist())))
            break
    if not objects:  # pragma: no cover - 50 attempts on an empty canvas always succeed
        raise RuntimeError(f"failed to place any object for seed {seed}")
    return SyntheticScene(np.clip(img, 0.0, 1.0).astype(np.float32), objects, seed)


# ---------------------------------------------------------------- proposals and targets


@dataclass(frozen=True)
class ProposalConfig:
    positives_per_gt: int = 8
    negatives: int = 24
    center_jitter: float = 0.15
    scale_range: tuple[float, float] = (0.8, 1.25)
    neg_size_range: tuple[float, float] = (12.0, 64.0)


ZERO_JITTER = ProposalConfig(positives_per_gt=1, negatives=0, center_jitter=0.0, scale_range=(1.0, 1.0))


def jitter_box(box: np.ndarray, rng: np.random.Generator, cfg: ProposalConfig, size: int) -> np.ndarray:
    if cfg.center_jitter == 0 and tuple(cfg.scale_range) == (1.0, 1.0):
        return np.array(box, dtype=np.float64)
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    cx = (x1 + x2) / 2 + rng.uniform(-cfg.center_jitter, cfg.center_jitter) * w
    cy = (y1 + y2) / 2 + rng.uniform(-cfg.center_jitter, cfg.center_jitter) * h
    nw = w * rng.uniform(*cfg.scale_range)
    nh = h * rng.uniform(*cfg.scale_range)
    out = np.array([cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2])
    return np.clip(out, 0.0, size)


def make_proposals(scene: SyntheticScene, seed: int, cfg: ProposalConfig = ProposalConfig()) -> list[BoxXYXY]:
    """``positives_per_gt`` jittered copies of every GT box followed by ``negatives`` random boxes."""
    rng = np.random.default_rng([seed, scene.seed])
    size = scene.image.shape[-1]
    out = []
    for obj in scene.objects:
        for _ in range(cfg.positives_per_gt):
            out.append(BoxXYXY(*jitter_box(obj.box.as_array(), rng, cfg, size).tolist()))
    lo, hi = cfg.neg_size_range
    for _ in range(cfg.negatives):
        w, h = rng.uniform(lo, hi, 2)
        x1 = rng.uniform(0, size - w)
        y1 = rng.uniform(0, size - h)
        out.append(BoxXYXY(x1, y1, x1 + w, y1 + h))
    return out


@dataclass
class TrainingSample:
    proposals: np.ndarray  # n×4
    labels: np.ndarray  # n, class index or BACKGROUND
    target_deltas: np.ndarray  # n×4, zero rows for background
    fg_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.fg_mask is None:
            self.fg_mask = self.labels != BACKGROUND


FG_IOU = 0.5


def assign_and_encode(
    proposals, gt_boxes: np.ndarray, gt_labels: np.ndarray, weights=(1.0, 1.0, 1.0, 1.0)
) -> TrainingSample:
    """Max-IoU assignment: foreground iff best IoU >= 0.5; deltas only for foreground."""
    props = np.array([b.as_array() if isinstance(b, BoxXYXY) else b for b in proposals], dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    n = len(props)
    labels = np.full(n, BACKGROUND, dtype=np.int64)
    deltas = np.zeros((n, 4))
    if n and len(gt_boxes):
        ious = iou_matrix(props, gt_boxes)
        best = ious.argmax(axis=1)
        fg = ious[np.arange(n), best] >= FG_IOU
        labels[fg] = gt_labels[best[fg]]
        if fg.any():
            deltas[fg] = encode_deltas(props[fg], gt_boxes[best[fg]], weights)
    return TrainingSample(props, labels, deltas)


# ---------------------------------------------------------------- export


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Binary P6 pixmap from a 3×H×W float image in [0, 1]."""
    _, h, w = image.shape
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    w, h, maxval = (int(f) for f in fields[1:])
    pixels = np.frombuffer(data[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float32) / maxval


def dump_scenes(directory: str | os.PathLike, seeds) -> list[Path]:
    """Write ``scene_<seed>.ppm`` plus ``scene_<seed>.txt`` (``class x1 y1 x2 y2`` per line)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for seed in seeds:
        scene = generate_scene(seed)
        stem = out / f"scene_{seed:06d}"
        write_ppm(stem.with_suffix(".ppm"), scene.image)
        lines = [f"{o.label} {o.box.x1:g} {o.box.y1:g} {o.box.x2:g} {o.box.y2:g}" for o in scene.objects]
        stem.with_suffix(".txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(stem.with_suffix(".ppm"))
    return written
