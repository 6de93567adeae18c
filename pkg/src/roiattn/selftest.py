"""Randomized oracle and invariant suites, shared by the CLI and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import reference
from . import tensor as T
from .attention import ExternalAttentionBlock, RoiAttentionStack, attention_forward, double_normalize, stack_forward
from .data import ZERO_JITTER, decode_deltas, encode_deltas, generate_scene, make_proposals
from .gradcheck import check_gradients
from .head import DoubleHeadParams, HeadConfig, forward_cls, forward_reg, head_forward
from .metrics import ImageDetections, ImageGroundTruth, evaluate_map
from .posenc import PosEncoder, encode
from .roi import BoxXYXY, RoiGrid, roi_align, roi_align_many, scale_box
from .tensor import Tensor

F64 = np.float64


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    detail: str
    seconds: float

    def row(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark}  {self.name:<22} {self.cases:>6} cases  {self.seconds:7.2f}s  {self.detail}"


def _leaf(rng, *shape, away_from_zero=False):
    v = rng.normal(size=shape)
    if away_from_zero:
        # keeps relu kinks out of reach of the finite-difference step
        v = np.sign(v) * (np.abs(v) + 0.05)
    return Tensor(v, requires_grad=True, dtype=F64)


def _box(rng, size):
    x1, y1 = rng.uniform(0, size - 2, 2)
    w, h = rng.uniform(1, size / 2, 2)
    return BoxXYXY(x1, y1, min(x1 + w, size), min(y1 + h, size))


# ---------------------------------------------------------------- gradients

GradCase = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


def _micro_head(rng, **kw) -> DoubleHeadParams:
    cfg = HeadConfig(channels=2, roi_size=3, num_classes=2, fc_hidden=4, reg_mid=2, reg_out=3, d=3, depth=1, **kw)
    return DoubleHeadParams.init(cfg, rng, F64)


def _case_matmul(rng):
    return T.matmul, [_leaf(rng, 3, 4), _leaf(rng, 4, 2)]


def _case_transpose(rng):
    return T.transpose, [_leaf(rng, 3, 5)]


def _case_linear(rng):
    return T.linear, [_leaf(rng, 3, 4), _leaf(rng, 4, 2), _leaf(rng, 2)]


def _case_add(rng):
    return T.add, [_leaf(rng, 2, 3), _leaf(rng, 2, 3)]


def _case_mul(rng):
    return T.mul, [_leaf(rng, 2, 3), _leaf(rng, 2, 3)]


def _case_scale(rng):
    c = float(rng.normal())
    return (lambda x: T.scale(x, c)), [_leaf(rng, 4)]


def _case_relu(rng):
    return T.relu, [_leaf(rng, 3, 4, away_from_zero=True)]


def _case_sum_all(rng):
    return T.sum_all, [_leaf(rng, 3, 4)]


def _case_softmax(rng):
    dim = int(rng.integers(0, 2))
    return (lambda x: T.softmax_dim(x, dim)), [_leaf(rng, 4, 3)]


def _case_l1(rng):
    x = Tensor(rng.uniform(0.1, 1.0, (3, 4)), requires_grad=True, dtype=F64)
    return (lambda x: T.l1_normalize_dim(x, 1)), [x]


def _case_dnorm(rng):
    return double_normalize, [_leaf(rng, 5, 3)]


def _case_reshape(rng):
    return (lambda x: T.reshape(x, (6, 2))), [_leaf(rng, 3, 4)]


def _case_concat(rng):
    return (lambda a, b: T.concat([a, b], 1)), [_leaf(rng, 2, 3), _leaf(rng, 2, 2)]


def _case_conv(rng):
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    return (
        lambda x, w, b: T.conv2d(x, w, b, stride, pad),
        [_leaf(rng, 2, 2, 5, 5), _leaf(rng, 3, 2, k, k), _leaf(rng, 3)],
    )


def _case_avg_pool(rng):
    return T.avg_pool_global, [_leaf(rng, 2, 3, 4, 4)]


def _case_cross_entropy(rng):
    labels = rng.integers(0, 4, 5)
    return (lambda z: T.cross_entropy_with_logits(z, labels)), [_leaf(rng, 5, 4)]


def _case_smooth_l1(rng):
    target = rng.normal(size=(4, 4))
    weights = rng.integers(0, 2, 4).astype(F64)
    pred = Tensor(target + rng.uniform(0.05, 2.0, (4, 4)) * rng.choice([-1, 1], (4, 4)), requires_grad=True, dtype=F64)
    # keep |pred - target| away from the beta=1 switch where the second derivative jumps
    diff = pred.values - target
    near = np.abs(np.abs(diff) - 1.0) < 0.01
    pred.values[near] += 0.05 * np.sign(diff[near])
    return (lambda p: T.smooth_l1(p, target, weights=weights, normalizer=max(weights.sum(), 1.0))), [pred]


def _case_take(rng):
    i = int(rng.integers(0, 3))
    return (lambda x: T.take(x, i)), [_leaf(rng, 3, 2, 2)]


def _case_roi_align(rng):
    boxes = [_box(rng, 24) for _ in range(2)]
    return (lambda f: roi_align_many(f, boxes, RoiGrid(3, 3, 0.25, 2))), [_leaf(rng, 2, 6, 6)]


def _case_attention_stack(rng):
    depth = int(rng.integers(1, 3))
    stack = RoiAttentionStack.init(3, 8, depth, rng, F64)
    return (lambda x, *p: stack_forward(x, stack)), [_leaf(rng, 4, 2, 2, 2), *stack.parameters()]


def _case_cls_branch(rng):
    head = _micro_head(rng)
    params = [*head.shared_attention.parameters(), head.cls_fc1.weight, head.cls_fc2.weight, head.cls_fc2.bias]
    return (lambda x, *p: forward_cls(x, head)), [_leaf(rng, 3, 2, 3, 3), *params]


def _case_reg_branch(rng):
    head = _micro_head(rng)
    b0 = head.reg_blocks[0]
    params = [*head.shared_attention.parameters(), b0.conv3.weight, b0.conv1.weight, b0.identity.bias, head.reg_out.weight]
    return (lambda x, *p: forward_reg(x, head)), [_leaf(rng, 3, 2, 3, 3), *params]


def _case_posenc(rng):
    enc = PosEncoder.init(3, rng, noise=0.3, dtype=F64)
    enc.weight.values[:, 3:] = rng.normal(size=(3, 2, 1, 1))
    return (lambda x, *p: encode(x, enc)), [_leaf(rng, 2, 3, 4, 5), *enc.parameters()]


def _case_total_loss(rng):
    from .data import TrainingSample
    from .pipeline import detection_loss

    head = _micro_head(rng)
    background = head.config.num_classes
    labels = rng.integers(0, background + 1, 4)
    labels[rng.integers(0, 4)] = background
    sample = TrainingSample([], labels, rng.normal(size=(4, 4)), labels != background)
    params = [*head.shared_attention.parameters(), head.cls_fc2.weight, head.reg_out.weight]
    return (
        lambda c, r, *p: detection_loss(head_forward(c, r, head), sample),
        [_leaf(rng, 4, 2, 3, 3), _leaf(rng, 4, 2, 3, 3), *params],
    )


GRADIENT_CASES: dict[str, GradCase] = {
    "matmul": _case_matmul,
    "transpose": _case_transpose,
    "linear": _case_linear,
    "add": _case_add,
    "mul": _case_mul,
    "scale": _case_scale,
    "relu": _case_relu,
    "sum_all": _case_sum_all,
    "softmax": _case_softmax,
    "l1_normalize": _case_l1,
    "double_normalize": _case_dnorm,
    "reshape": _case_reshape,
    "concat": _case_concat,
    "conv2d": _case_conv,
    "avg_pool_global": _case_avg_pool,
    "cross_entropy": _case_cross_entropy,
    "smooth_l1": _case_smooth_l1,
    "take": _case_take,
    "roi_align": _case_roi_align,
    "attention_stack": _case_attention_stack,
    "cls_branch": _case_cls_branch,
    "reg_branch": _case_reg_branch,
    "pos_encoder": _case_posenc,
    "total_loss": _case_total_loss,
}


def gradient_suite(
    n_instances: int = 20, seed: int = 0, rtol: float = 1e-3, atol: float = 1e-5, step: float = 1e-6
) -> SuiteResult:
    # a small step in float64 keeps central differences from straddling relu kinks inside the branches
    t0 = time.perf_counter()
    failures, cases = [], 0
    for k, (name, build) in enumerate(GRADIENT_CASES.items()):
        for i in range(n_instances):
            rng = np.random.default_rng([seed, k, i])
            fn, inputs = build(rng)
            res = check_gradients(fn, inputs, rtol=rtol, atol=atol, step=step, seed=i)
            cases += 1
            if not res:
                failures.append(f"{name}#{i}: {res.worst}")
    detail = f"{len(GRADIENT_CASES)} ops/branches x {n_instances}"
    if failures:
        detail = "; ".join(failures[:3])
    return SuiteResult("gradients", not failures, cases, detail, time.perf_counter() - t0)


# ---------------------------------------------------------------- double normalization


def dnorm_suite(n_matrices: int = 10_000, max_size: int = 64, seed: int = 0) -> SuiteResult:
    """Rows of DNorm sum to 1, entries are nonnegative, softmax columns sum to 1."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_row = worst_col = 0.0
    negative = 0
    for _ in range(n_matrices):
        s, d = rng.integers(1, max_size + 1, 2)
        # unit-order scores, as produced by memories initialized at std 1/sqrt(L)
        scores = Tensor(rng.normal(size=(s, d)))
        cols = T.softmax_dim(scores, 0).values
        out = double_normalize(scores).values
        worst_col = max(worst_col, float(np.abs(cols.sum(axis=0, dtype=F64) - 1).max()))
        worst_row = max(worst_row, float(np.abs(out.sum(axis=1, dtype=F64) - 1).max()))
        negative += int((out < 0).sum())
    ok = worst_row <= 1e-5 and worst_col <= 1e-6 and negative == 0
    detail = f"max row err {worst_row:.2e}, max col err {worst_col:.2e}, negatives {negative}"
    return SuiteResult("double_normalize", ok, n_matrices, detail, time.perf_counter() - t0)


# ---------------------------------------------------------------- scalar oracles


def _oracle_attention(rng):
    s, L, d = rng.integers(1, 17, 3)
    x = rng.normal(size=(s, L)).astype(np.float32)
    block = ExternalAttentionBlock.init(int(d), int(L), rng)
    got = attention_forward(Tensor(x), block).values
    want = np.array(reference.attention_forward(x, block.mem_key.values, block.mem_value.values))
    return float(np.abs(got - want).max())


def _oracle_encode(rng):
    C, H, W = rng.integers(1, 17, 3)
    x = rng.normal(size=(C, H, W)).astype(np.float32)
    enc = PosEncoder.init(int(C), rng, noise=0.5)
    enc.weight.values[:, C:] = rng.normal(size=(C, 2, 1, 1))
    enc.bias.values[:] = rng.normal(size=C)
    got = encode(Tensor(x), enc).values
    want = np.array(reference.encode(x, enc.weight.values[:, :, 0, 0], enc.bias.values))
    return float(np.abs(got - want).max())


def _oracle_roi_align(rng):
    C = int(rng.integers(1, 5))
    H, W = rng.integers(2, 17, 2)
    scale = float(rng.choice([1.0, 0.5, 0.25, 0.125]))
    out_h, out_w, sampling = (int(v) for v in rng.integers(1, 5, 3))
    f = rng.normal(size=(C, H, W)).astype(np.float32)
    box = _box(rng, min(H, W) / scale)
    got = roi_align(Tensor(f), box, RoiGrid(out_h, out_w, scale, sampling)).values
    want = np.array(reference.roi_align(f.tolist(), (box.x1, box.y1, box.x2, box.y2), out_h, out_w, scale, sampling))
    return float(np.abs(got - want).max())


def _oracle_map(rng):
    n_img = int(rng.integers(1, 4))
    gts, dets = [], []
    budget = 10
    for _ in range(n_img):
        ng = int(rng.integers(0, min(4, budget) + 1))
        nd = int(rng.integers(0, min(4, budget - ng) + 1))
        budget -= ng + nd
        gb = rng.uniform(0, 40, (ng, 2))
        gboxes = np.hstack([gb, gb + rng.uniform(4, 20, (ng, 2))])
        src = gboxes[rng.integers(0, ng, nd)] if ng else np.hstack([rng.uniform(0, 40, (nd, 2))] * 2) + [0, 0, 8, 8]
        dboxes = src + rng.normal(0, 2.5, (nd, 4))
        dboxes[:, 2:] = np.maximum(dboxes[:, 2:], dboxes[:, :2] + 1)
        gts.append(ImageGroundTruth(gboxes, rng.integers(0, 2, ng)))
        dets.append(ImageDetections(dboxes, np.round(rng.uniform(0, 1, nd), 1), rng.integers(0, 2, nd)))
    table = evaluate_map(dets, gts, num_classes=2)
    err = 0.0
    for c in range(2):
        gmap = {i: g.boxes[g.labels == c].tolist() for i, g in enumerate(gts)}
        if not any(gmap.values()):
            continue
        flat = [(float(s), i, b.tolist()) for i, d in enumerate(dets) for b, s, l in zip(d.boxes, d.scores, d.labels) if l == c]
        for t in table.thresholds:
            err = max(err, abs(table.per_class[c][t] - reference.average_precision(flat, gmap, t)))
    return err


ORACLES = {
    "attention_forward": _oracle_attention,
    "encode": _oracle_encode,
    "roi_align": _oracle_roi_align,
    "evaluate_map": _oracle_map,
}


def oracle_suite(n_trials: int = 500, seed: int = 0, atol: float = 1e-5) -> SuiteResult:
    t0 = time.perf_counter()
    worst = {k: 0.0 for k in ORACLES}
    for trial in range(n_trials):
        for k, (name, fn) in enumerate(ORACLES.items()):
            worst[name] = max(worst[name], fn(np.random.default_rng([seed, trial, k])))
    ok = all(v <= atol for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return SuiteResult("scalar_oracles", ok, n_trials * len(ORACLES), detail, time.perf_counter() - t0)


# ---------------------------------------------------------------- identities


def identity_suite(n_instances: int = 50, seed: int = 0) -> SuiteResult:
    """Exact identities: zero value memory, empty stack, unit box scale, zero-jitter proposals."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    bad = []
    for i in range(n_instances):
        s, C, h = (int(v) for v in rng.integers(1, 6, 3))
        x = Tensor(rng.normal(size=(s, C, h, h)))
        stack = RoiAttentionStack.init(int(rng.integers(1, 12)), C * h * h, int(rng.integers(1, 4)), rng)
        for b in stack.blocks:
            b.mem_value.values[:] = 0
        if not np.array_equal(stack_forward(x, stack).values, x.values):
            bad.append(f"M_v=0 #{i}")
        if stack_forward(x, RoiAttentionStack([])) is not x:
            bad.append(f"depth=0 #{i}")
        box = _box(rng, 128)
        if scale_box(box, 1.0, 128, 128) != box:
            bad.append(f"scale_box #{i}")
        scene = generate_scene(seed * 1000 + i)
        if make_proposals(scene, i, ZERO_JITTER) != [o.box for o in scene.objects]:
            bad.append(f"zero jitter #{i}")
    detail = "; ".join(bad[:4]) if bad else "M_v=0, depth=0, scale_box(1), zero jitter"
    return SuiteResult("identity_laws", not bad, 4 * n_instances, detail, time.perf_counter() - t0)


# ---------------------------------------------------------------- misc invariants


def box_codec_suite(n_pairs: int = 10_000, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    lo = rng.uniform(0, 100, (n_pairs, 2))
    p = np.hstack([lo, lo + rng.uniform(1, 40, (n_pairs, 2))])
    lo = p[:, :2] + rng.normal(0, 4, (n_pairs, 2))
    g = np.hstack([lo, lo + (p[:, 2:] - p[:, :2]) * np.exp(rng.normal(0, 0.3, (n_pairs, 2)))])
    err = float(np.abs(decode_deltas(encode_deltas(p, g, (10, 10, 5, 5)), p, (10, 10, 5, 5)) - g).max())
    return SuiteResult("box_codec_round_trip", err <= 1e-5, n_pairs, f"max err {err:.1e}", time.perf_counter() - t0)


def equivariance_suite(n_instances: int = 20, seed: int = 0) -> SuiteResult:
    """Permuting RoIs permutes head outputs."""
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i])
        head = _micro_head(rng)
        s = int(rng.integers(2, 8))
        c, r = rng.normal(size=(2, s, 2, 3, 3))
        perm = rng.permutation(s)
        a = head_forward(Tensor(c, dtype=F64), Tensor(r, dtype=F64), head)
        b = head_forward(Tensor(c[perm], dtype=F64), Tensor(r[perm], dtype=F64), head)
        worst = max(
            worst,
            float(np.abs(b.class_logits.values - a.class_logits.values[perm]).max()),
            float(np.abs(b.box_deltas.values - a.box_deltas.values[perm]).max()),
        )
    return SuiteResult("permutation_equivariance", worst <= 1e-10, n_instances, f"max err {worst:.1e}", time.perf_counter() - t0)


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "gradients": gradient_suite,
    "double_normalize": dnorm_suite,
    "scalar_oracles": oracle_suite,
    "identity_laws": identity_suite,
    "box_codec_round_trip": box_codec_suite,
    "permutation_equivariance": equivariance_suite,
}


def run_all(progress: Callable[[SuiteResult], None] | None = None) -> list[SuiteResult]:
    results = []
    for fn in SUITES.values():
        r = fn()
        results.append(r)
        if progress:
            progress(r)
    return results


def format_table(results: list[SuiteResult]) -> str:
    return "\n".join(r.row() for r in results) + "\n"
