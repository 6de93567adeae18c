"""Toy end-to-end detector: backbone, proposals, head, losses, training and evaluation."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import (
    BACKGROUND,
    NUM_CLASSES,
    ProposalConfig,
    SyntheticScene,
    TrainingSample,
    assign_and_encode,
    decode_deltas,
    generate_scene,
    make_proposals,
)
from .head import (
    Conv,
    DoubleHeadParams,
    HeadConfig,
    HeadOutput,
    SingleHeadParams,
    head_forward,
    single_head_forward,
)
from .metrics import APTable, ImageDetections, ImageGroundTruth, evaluate_map
from .posenc import PosEncoder, encode
from .roi import BoxXYXY, RoiGrid, roi_align_many, scale_box
from .tensor import Tensor

log = logging.getLogger(__name__)

# regression targets are scaled by these before the smooth-L1 loss
DELTA_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
VAL_SEED_OFFSET = 1_000_000


@dataclass
class DetectionConfig:
    d: int = 10
    depth: int = 1
    reg_scale: float = 1.3
    use_double_head: bool = True
    use_pos_encoding: bool = True
    attach_attention_cls: bool = True
    attach_attention_reg: bool = True
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 12
    lr_decay_epochs: tuple[int, ...] = (8, 11)
    lr_decay: float = 0.1
    warmup_iters: int = 100
    warmup_ratio: float = 0.001
    batch_size: int = 4
    seed: int = 0
    train_scenes: int = 512
    val_scenes: int = 128
    backbone_channels: tuple[int, ...] = (16, 32, 32)
    feature_channels: int = 32
    fc_hidden: int = 256
    reg_mid: int = 32
    reg_out: int = 64
    roi_size: int = 7
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        positive = ("d", "reg_scale", "epochs", "batch_size", "train_scenes", "val_scenes", "feature_channels",
                    "fc_hidden", "reg_mid", "reg_out", "roi_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("depth", "lr", "momentum", "weight_decay", "warmup_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")

    def head_config(self) -> HeadConfig:
        return HeadConfig(
            channels=self.feature_channels,
            roi_size=self.roi_size,
            num_classes=NUM_CLASSES,
            fc_hidden=self.fc_hidden,
            reg_mid=self.reg_mid,
            reg_out=self.reg_out,
            d=self.d,
            depth=self.depth,
            attach_attention_cls=self.attach_attention_cls,
            attach_attention_reg=self.attach_attention_reg,
        )

    def replace(self, **changes) -> "DetectionConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- config text


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(p) for p in raw.replace(" ", "").split(",") if p)
    return type(default)(raw)


CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(DetectionConfig)}
_DEFAULTS = DetectionConfig()


def coerce_config_value(key: str, raw: str):
    if key not in CONFIG_FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return _parse_value(raw.strip(), getattr(_DEFAULTS, key))


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value': {line!r}")
        key, raw = (p.strip() for p in stripped.split("=", 1))
        try:
            out[key] = coerce_config_value(key, raw)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"line {lineno}: {exc}: {line!r}") from None
    return out


def format_config(cfg: DetectionConfig) -> str:
    lines = []
    for name in CONFIG_FIELDS:
        v = getattr(cfg, name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- model


@dataclass
class Backbone:
    """Three stride-2 4×4 convs and one 3×3 conv: a single stride-8 feature level."""

    convs: list[Conv]

    @classmethod
    def init(cls, widths: Sequence[int], out_channels: int, rng: np.random.Generator) -> "Backbone":
        convs, n_in = [], 3
        for w in widths:
            convs.append(Conv.init(n_in, w, 4, rng, stride=2, padding=1))
            n_in = w
        convs.append(Conv.init(n_in, out_channels, 3, rng))
        return cls(convs)

    @property
    def stride(self) -> int:
        return 2 ** (len(self.convs) - 1)

    def __call__(self, images: Tensor) -> Tensor:
        h = images
        for conv in self.convs:
            h = T.relu(conv(h))
        return h

    def named_parameters(self, prefix="backbone"):
        out = {}
        for i, c in enumerate(self.convs):
            out.update(c.named_parameters(f"{prefix}.{i}"))
        return out


@dataclass
class ForwardTrace:
    """Intermediate maps of one forward pass, kept for structural checks."""

    features: Tensor
    cls_source: list[Tensor]
    reg_source: list[Tensor]
    outputs: list[HeadOutput]


class Detector:
    def __init__(self, config: DetectionConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.backbone = Backbone.init(config.backbone_channels, config.feature_channels, rng)
        self.posenc = PosEncoder.init(config.feature_channels, rng) if config.use_pos_encoding else None
        hc = self.head_config = config.head_config()
        self.head = DoubleHeadParams.init(hc, rng) if config.use_double_head else SingleHeadParams.init(hc, rng)
        self.grid = RoiGrid(config.roi_size, config.roi_size, 1.0 / self.backbone.stride, 2)

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.backbone.named_parameters()
        if self.posenc is not None:
            out.update(self.posenc.named_parameters())
        out.update(self.head.named_parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise checkpoint.CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise checkpoint.CheckpointError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.values = np.array(state[k], dtype=np.float32)
            p.zero_grad()

    def forward(self, images: np.ndarray, proposals: Sequence[Sequence[BoxXYXY]]) -> ForwardTrace:
        feats = self.backbone(Tensor(images))
        reg_feats = encode(feats, self.posenc) if self.posenc is not None else feats
        size = images.shape[-1]
        cls_src, reg_src, outs = [], [], []
        for b, boxes in enumerate(proposals):
            fc = T.take(feats, b)
            fr = T.take(reg_feats, b) if reg_feats is not feats else fc
            cls_src.append(fc)
            reg_src.append(fr)
            cls_boxes = [scale_box(bx, 1.0, size, size) for bx in boxes]
            cls_rois = roi_align_many(fc, cls_boxes, self.grid)
            if self.config.use_double_head:
                reg_boxes = [scale_box(bx, self.config.reg_scale, size, size) for bx in boxes]
                reg_rois = roi_align_many(fr, reg_boxes, self.grid)
                outs.append(head_forward(cls_rois, reg_rois, self.head))
            else:
                outs.append(single_head_forward(cls_rois, self.head))
        return ForwardTrace(feats, cls_src, reg_src, outs)


# ---------------------------------------------------------------- losses


def detection_loss(out: HeadOutput, sample: TrainingSample) -> Tensor:
    """Mean cross-entropy over all proposals plus smooth-L1 averaged over foreground proposals."""
    ce = T.cross_entropy_with_logits(out.class_logits, sample.labels)
    fg = sample.fg_mask.astype(np.float64)
    reg = T.smooth_l1(out.box_deltas, sample.target_deltas, weights=fg, beta=1.0, normalizer=max(fg.sum(), 1.0))
    return T.add(ce, reg)


# ---------------------------------------------------------------- inference


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    from .data import iou_matrix

    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.asarray(keep, dtype=np.int64)


def postprocess(out: HeadOutput, proposals: Sequence[BoxXYXY], cfg: DetectionConfig, image_size: int) -> ImageDetections:
    logits = out.class_logits.values.astype(np.float64)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    props = np.array([b.as_array() for b in proposals]).reshape(-1, 4)
    boxes = np.clip(decode_deltas(out.box_deltas.values, props, DELTA_WEIGHTS), 0.0, image_size)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    all_b, all_s, all_l = [], [], []
    for c in range(probs.shape[1] - 1):
        sel = np.nonzero(valid & (probs[:, c] > cfg.score_threshold))[0]
        if not len(sel):
            continue
        keep = sel[nms(boxes[sel], probs[sel, c], cfg.nms_iou)]
        all_b.append(boxes[keep])
        all_s.append(probs[keep, c])
        all_l.append(np.full(len(keep), c))
    if not all_b:
        return ImageDetections(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))
    b, s, l = np.concatenate(all_b), np.concatenate(all_s), np.concatenate(all_l)
    top = np.argsort(-s, kind="stable")[: cfg.max_detections]
    return ImageDetections(b[top], s[top], l[top])


def scene_seeds(cfg: DetectionConfig, split: str) -> list[int]:
    base = cfg.seed * 10_000_000
    if split == "train":
        return [base + i for i in range(cfg.train_scenes)]
    return [base + VAL_SEED_OFFSET + i for i in range(cfg.val_scenes)]


def evaluate(model: Detector, scenes: Sequence[SyntheticScene], proposal_seed: int = 12345) -> APTable:
    cfg = model.config
    dets, gts = [], []
    with T.no_grad():
        for start in range(0, len(scenes), cfg.batch_size):
            batch = scenes[start : start + cfg.batch_size]
            props = [make_proposals(s, proposal_seed) for s in batch]
            trace = model.forward(np.stack([s.image for s in batch]), props)
            for s, p, out in zip(batch, props, trace.outputs):
                dets.append(postprocess(out, p, cfg, s.image.shape[-1]))
                gts.append(ImageGroundTruth(s.boxes, s.labels))
    return evaluate_map(dets, gts, num_classes=NUM_CLASSES)


# ---------------------------------------------------------------- training


def lr_at(cfg: DetectionConfig, epoch: int, iteration: int) -> float:
    """Step decay after each listed epoch (epochs are 0-based) with linear warmup over the first iterations."""
    lr = cfg.lr * cfg.lr_decay ** sum(epoch >= e for e in cfg.lr_decay_epochs)
    if iteration < cfg.warmup_iters:
        frac = iteration / cfg.warmup_iters
        lr *= cfg.warmup_ratio + (1.0 - cfg.warmup_ratio) * frac
    return lr


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    mAP: float
    AP50: float
    AP75: float

    def csv(self) -> str:
        return f"{self.epoch},{self.loss:.6f},{self.mAP:.6f},{self.AP50:.6f},{self.AP75:.6f}"


METRICS_HEADER = "epoch,loss,mAP,AP50,AP75"


@dataclass
class TrainResult:
    model: Detector
    history: list[EpochMetrics]
    iteration_losses: list[float] = field(default_factory=list)

    def checkpoint_bytes(self) -> bytes:
        return checkpoint.dumps(self.model.state_dict())

    def metrics_text(self) -> str:
        return "\n".join([METRICS_HEADER] + [m.csv() for m in self.history]) + "\n"


def train_step(model: Detector, scenes: Sequence[SyntheticScene], proposal_seed: int, lr: float, state: dict) -> float:
    props = [make_proposals(s, proposal_seed) for s in scenes]
    samples = [assign_and_encode(p, s.boxes, s.labels, DELTA_WEIGHTS) for p, s in zip(props, scenes)]
    trace = model.forward(np.stack([s.image for s in scenes]), props)
    total = None
    for out, sample in zip(trace.outputs, samples):
        l = detection_loss(out, sample)
        total = l if total is None else T.add(total, l)
    loss = T.scale(total, 1.0 / len(scenes))
    params = model.parameters()
    T.zero_grads(params)
    loss.backward()
    cfg = model.config
    T.sgd_step(params, lr, cfg.momentum, cfg.weight_decay, state)
    return float(loss.values)


def train(
    config: DetectionConfig,
    eval_every_epoch: bool = True,
    progress: Callable[[str], None] | None = None,
    train_scenes: Sequence[SyntheticScene] | None = None,
    val_scenes: Sequence[SyntheticScene] | None = None,
) -> TrainResult:
    """Deterministic training run; returns the trained model and per-epoch metrics."""
    model = Detector(config)
    train_scenes = train_scenes if train_scenes is not None else [generate_scene(s) for s in scene_seeds(config, "train")]
    if val_scenes is None and eval_every_epoch:
        val_scenes = [generate_scene(s) for s in scene_seeds(config, "val")]
    state: dict = {}
    history, it_losses = [], []
    iteration = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_scenes))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_scenes[i] for i in order[start : start + config.batch_size]]
            lr = lr_at(config, epoch, iteration)
            losses.append(train_step(model, batch, config.seed * 1000 + epoch, lr, state))
            iteration += 1
        it_losses += losses
        mean_loss = math.fsum(losses) / len(losses)
        if eval_every_epoch:
            table = evaluate(model, val_scenes)
            m = EpochMetrics(epoch + 1, mean_loss, table.AP, table.AP50, table.AP75)
        else:
            m = EpochMetrics(epoch + 1, mean_loss, float("nan"), float("nan"), float("nan"))
        history.append(m)
        msg = f"epoch {m.epoch}: loss {m.loss:.4f} AP {m.mAP:.3f} AP50 {m.AP50:.3f} AP75 {m.AP75:.3f} ({time.perf_counter() - t0:.1f}s)"
        log.info(msg)
        if progress:
            progress(msg)
    return TrainResult(model, history, it_losses)


def write_outputs(result: TrainResult, out_dir: str | os.PathLike) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    ckpt_path = out / "checkpoint.ratn"
    metrics_path.write_text(result.metrics_text(), encoding="utf-8")
    checkpoint.save(ckpt_path, result.model.state_dict())
    (out / "config.cfg").write_text(format_config(result.model.config), encoding="utf-8")
    return metrics_path, ckpt_path


def load_model(path: str | os.PathLike, config: DetectionConfig) -> Detector:
    model = Detector(config)
    model.load_state_dict(checkpoint.load(path))
    return model


def state_hash(model: Detector) -> str:
    return hashlib.sha256(checkpoint.dumps(model.state_dict())).hexdigest()


# ---------------------------------------------------------------- ablations

# AP values reported for d × depth with a single head and no positional encoding
REFERENCE_GRID_AP = {
    (10, 1): 45.4, (20, 1): 45.1, (40, 1): 45.1, (80, 1): 45.0,
    (10, 2): 44.9, (20, 2): 45.3, (40, 2): 45.0, (80, 2): 45.2,
    (10, 3): 45.1, (20, 3): 45.0, (40, 3): 44.9, (80, 3): 45.1,
}

# head variants and their reported AP
HEAD_VARIANTS = {
    "baseline": (dict(use_double_head=False, use_pos_encoding=False, attach_attention_cls=False, attach_attention_reg=False), 44.5),
    "+RoI attention": (dict(use_double_head=False, use_pos_encoding=False, attach_attention_cls=True, attach_attention_reg=False), 45.4),
    "Only cls.": (dict(use_double_head=True, use_pos_encoding=False, attach_attention_cls=True, attach_attention_reg=False), 45.4),
    "Only reg.": (dict(use_double_head=True, use_pos_encoding=False, attach_attention_cls=False, attach_attention_reg=True), 45.4),
    "Both": (dict(use_double_head=True, use_pos_encoding=False, attach_attention_cls=True, attach_attention_reg=True), 45.8),
    "Full": (dict(use_double_head=True, use_pos_encoding=True, attach_attention_cls=True, attach_attention_reg=True), 46.0),
}


@dataclass
class AblationRow:
    d: int
    depth: int
    AP: float
    AP50: float
    AP75: float
    reference_AP: float


ABLATION_HEADER = "d,depth,AP,AP50,AP75,paper_AP"


def run_ablation(
    base: DetectionConfig,
    ds: Sequence[int] = (10, 20, 40, 80),
    depths: Sequence[int] = (1, 2, 3),
    progress: Callable[[str], None] | None = None,
) -> list[AblationRow]:
    """Train and evaluate one single-head model with attention per (d, depth) cell."""
    rows = []
    train_set = [generate_scene(s) for s in scene_seeds(base, "train")]
    val_set = [generate_scene(s) for s in scene_seeds(base, "val")]
    for depth in depths:
        for d in ds:
            cfg = base.replace(d=d, depth=depth, use_double_head=False, use_pos_encoding=False,
                               attach_attention_cls=True, attach_attention_reg=False)
            result = train(cfg, eval_every_epoch=False, train_scenes=train_set)
            table = evaluate(result.model, val_set)
            rows.append(AblationRow(d, depth, table.AP, table.AP50, table.AP75, REFERENCE_GRID_AP.get((d, depth), float("nan"))))
            if progress:
                progress(f"d={d} depth={depth}: AP {table.AP:.3f}")
    return rows


def format_ablation_csv(rows: Sequence[AblationRow]) -> str:
    lines = [ABLATION_HEADER]
    lines += [f"{r.d},{r.depth},{r.AP:.6f},{r.AP50:.6f},{r.AP75:.6f},{r.reference_AP:.1f}" for r in rows]
    return "\n".join(lines) + "\n"


def format_ablation_markdown(rows: Sequence[AblationRow]) -> str:
    lines = ["| d | depth | AP | AP50 | AP75 | reference AP |", "|---|---|---|---|---|---|"]
    lines += [f"| {r.d} | {r.depth} | {100 * r.AP:.1f} | {100 * r.AP50:.1f} | {100 * r.AP75:.1f} | {r.reference_AP:.1f} |" for r in rows]
    return "\n".join(lines) + "\n"


@dataclass
class VariantReport:
    aps: dict[str, list[float]]
    inversions: list[str]

    def mean(self, name: str) -> float:
        return float(np.mean(self.aps[name]))

    def text(self) -> str:
        lines = ["variant,mean_AP,seed_APs,reference_AP"]
        for name, vals in self.aps.items():
            seeds = ";".join(f"{v:.4f}" for v in vals)
            lines.append(f"{name},{self.mean(name):.4f},{seeds},{HEAD_VARIANTS[name][1]}")
        for inv in self.inversions:
            lines.append(f"# INVERSION: {inv}")
        if not self.inversions:
            lines.append("# ordering matches: baseline <= +RoI attention, Both <= Full")
        return "\n".join(lines) + "\n"


EXPECTED_ORDER = (("baseline", "+RoI attention"), ("Both", "Full"))


def run_variant_ablation(
    base: DetectionConfig,
    seeds: Sequence[int] = (0, 1, 2),
    variants: Sequence[str] = tuple(HEAD_VARIANTS),
    progress: Callable[[str], None] | None = None,
) -> VariantReport:
    """Head-structure ablation over several seeds; orderings that disagree are flagged, never raised."""
    aps: dict[str, list[float]] = {v: [] for v in variants}
    for seed in seeds:
        seeded = base.replace(seed=seed)
        train_set = [generate_scene(s) for s in scene_seeds(seeded, "train")]
        val_set = [generate_scene(s) for s in scene_seeds(seeded, "val")]
        for name in variants:
            cfg = seeded.replace(**HEAD_VARIANTS[name][0])
            result = train(cfg, eval_every_epoch=False, train_scenes=train_set)
            ap = evaluate(result.model, val_set).AP
            aps[name].append(ap)
            if progress:
                progress(f"seed {seed} {name}: AP {ap:.3f}")
    report = VariantReport(aps, [])
    for lo, hi in EXPECTED_ORDER:
        if lo in aps and hi in aps and report.mean(lo) > report.mean(hi):
            report.inversions.append(f"{lo} ({report.mean(lo):.4f}) > {hi} ({report.mean(hi):.4f})")
    return report
