import math

import numpy as np
import pytest

from roiattn import tensor as T
from roiattn.data import BACKGROUND, TrainingSample, generate_scene
from roiattn.gradcheck import check_gradients
from roiattn.head import DoubleHeadParams, HeadConfig, HeadOutput, head_forward
from roiattn.pipeline import (
    REFERENCE_GRID_AP,
    ConfigError,
    DetectionConfig,
    Detector,
    detection_loss,
    format_ablation_csv,
    format_config,
    lr_at,
    nms,
    parse_config_text,
    run_ablation,
    run_variant_ablation,
    state_hash,
    train,
    train_step,
)
from roiattn.tensor import Tensor

TINY = DetectionConfig(
    train_scenes=4, val_scenes=4, epochs=1, batch_size=2, backbone_channels=(4, 4, 4), feature_channels=4,
    fc_hidden=8, reg_mid=4, reg_out=4, warmup_iters=0,
)


def sample(labels, deltas):
    labels = np.asarray(labels)
    fg = labels != BACKGROUND
    return TrainingSample([], labels, np.asarray(deltas, dtype=np.float64), fg)


def test_perfect_prediction_has_tiny_loss():
    labels = np.array([0, 3, BACKGROUND, 1])
    deltas = np.random.default_rng(0).normal(size=(4, 4))
    deltas[2] = 0
    logits = np.eye(5)[labels] * 1e6
    out = HeadOutput(Tensor(logits, dtype=np.float64), Tensor(deltas, dtype=np.float64))
    assert float(detection_loss(out, sample(labels, deltas)).values) < 1e-3


def test_uniform_logits_give_log5():
    labels = np.array([0, BACKGROUND, 2])
    out = HeadOutput(Tensor(np.zeros((3, 5))), Tensor(np.zeros((3, 4))))
    loss = float(detection_loss(out, sample(labels, np.zeros((3, 4)))).values)
    assert loss == pytest.approx(math.log(5), abs=1e-5)


def test_loss_is_nonnegative(rng):
    for _ in range(20):
        labels = rng.integers(0, 5, 6)
        out = HeadOutput(Tensor(rng.normal(size=(6, 5))), Tensor(rng.normal(size=(6, 4))))
        assert float(detection_loss(out, sample(labels, rng.normal(size=(6, 4)))).values) >= 0


def test_loss_gradient_through_head(rng):
    cfg = HeadConfig(channels=2, roi_size=3, num_classes=4, fc_hidden=4, reg_mid=2, reg_out=3, d=3)
    head = DoubleHeadParams.init(cfg, rng, np.float64)
    c = Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True, dtype=np.float64)
    r = Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True, dtype=np.float64)
    s = sample([0, BACKGROUND, 3, 1], rng.normal(size=(4, 4)))
    params = [*head.shared_attention.parameters(), head.cls_fc2.weight, head.reg_out.weight]
    assert check_gradients(lambda c, r, *p: detection_loss(head_forward(c, r, head), s), [c, r, *params])


def test_nms_suppresses_overlaps():
    boxes = np.array([[0, 0, 10, 10], [1, 1, 10, 10], [20, 20, 30, 30]], dtype=float)
    keep = nms(boxes, np.array([0.9, 0.8, 0.7]), 0.5)
    assert keep.tolist() == [0, 2]


def test_lr_schedule():
    cfg = DetectionConfig(lr=1.0, warmup_iters=10, warmup_ratio=0.001)
    assert lr_at(cfg, 0, 0) == pytest.approx(0.001)
    assert lr_at(cfg, 0, 10) == 1.0
    assert lr_at(cfg, 8, 10_000) == pytest.approx(0.1)
    assert lr_at(cfg, 11, 10_000) == pytest.approx(0.01)


def test_lr_zero_leaves_parameters_unchanged():
    cfg = TINY.replace(lr=0.0)
    before = state_hash(Detector(cfg))
    result = train(cfg, eval_every_epoch=False)
    assert state_hash(result.model) == before


def test_training_is_deterministic():
    a = train(TINY)
    b = train(TINY)
    assert a.metrics_text() == b.metrics_text()
    assert a.checkpoint_bytes() == b.checkpoint_bytes()


def test_classification_crops_come_from_raw_features():
    model = Detector(TINY)
    scenes = [generate_scene(1), generate_scene(2)]
    boxes = [[o.box for o in s.objects] for s in scenes]
    trace = model.forward(np.stack([s.image for s in scenes]), boxes)
    for b in range(2):
        np.testing.assert_array_equal(trace.cls_source[b].values, trace.features.values[b])
        assert not np.array_equal(trace.reg_source[b].values, trace.features.values[b])
    plain = Detector(TINY.replace(use_pos_encoding=False))
    trace = plain.forward(np.stack([s.image for s in scenes]), boxes)
    assert trace.reg_source[0] is trace.cls_source[0]


def test_variant_flags_wire_modules():
    single = Detector(TINY.replace(use_double_head=False))
    assert not any(k.startswith("head.reg_blocks") for k in single.named_parameters())
    assert "posenc.weight" not in Detector(TINY.replace(use_pos_encoding=False)).named_parameters()


def test_config_round_trip():
    cfg = DetectionConfig(d=20, depth=2, lr_decay_epochs=(3, 5), use_pos_encoding=False)
    assert DetectionConfig(**parse_config_text(format_config(cfg))) == cfg


def test_config_comments_and_blanks():
    parsed = parse_config_text("# header\n\nd = 40  # memory size\ndepth=3\n")
    assert parsed == {"d": 40, "depth": 3}


@pytest.mark.parametrize(
    "text, quoted",
    [("d 10", "d 10"), ("bogus = 1", "bogus = 1"), ("depth = two", "depth = two"), ("use_double_head = maybe", "maybe")],
)
def test_config_errors_quote_the_line(text, quoted):
    with pytest.raises(ConfigError) as err:
        parse_config_text("d = 10\n" + text + "\n")
    assert quoted in str(err.value) and "line 2" in str(err.value)


def test_config_rejects_nonpositive_values():
    with pytest.raises(ValueError):
        DetectionConfig(d=0)
    with pytest.raises(ValueError):
        DetectionConfig(lr=-1.0)


def test_ablation_grid_and_reference_column():
    rows = run_ablation(TINY.replace(epochs=1))
    assert len(rows) == 12
    assert {(r.d, r.depth) for r in rows} == set(REFERENCE_GRID_AP)
    csv = format_ablation_csv(rows)
    assert csv.splitlines()[0] == "d,depth,AP,AP50,AP75,paper_AP"
    assert "10,1," in csv and csv.splitlines()[1].endswith(",45.4")
    assert format_ablation_csv(run_ablation(TINY.replace(epochs=1))) == csv


def test_variant_report_flags_rather_than_raises():
    report = run_variant_ablation(TINY, seeds=(0,), variants=("baseline", "+RoI attention"))
    text = report.text()
    assert text.startswith("variant,mean_AP,seed_APs,reference_AP")
    assert ("INVERSION" in text) == bool(report.inversions)


def test_overfit_eight_scenes():
    # fixed scenes and proposals, constant learning rate
    model = Detector(DetectionConfig(warmup_iters=0))
    scenes = [generate_scene(s) for s in range(8)]
    state: dict = {}
    losses = [train_step(model, scenes[(i % 2) * 4 : (i % 2) * 4 + 4], 7, 0.005, state) for i in range(200)]
    final = float(np.mean(losses[-10:]))
    print(f"overfit: first {losses[0]:.4f} final {final:.4f} ratio {losses[0] / final:.2f}")
    assert losses[0] / final >= 10.0
