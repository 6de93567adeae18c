import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from roiattn import reference
from roiattn import tensor as T
from roiattn.attention import (
    ExternalAttentionBlock,
    RoiAttentionStack,
    attention_forward,
    attention_scores,
    bench_attention,
    dense_attention_flops,
    double_normalize,
    external_attention_flops,
    format_bench,
    stack_forward,
)
from roiattn.gradcheck import check_gradients
from roiattn.tensor import DimensionError, Tensor


def block(rng, d, L, dtype=np.float32):
    return ExternalAttentionBlock.init(d, L, rng, dtype)


def test_memory_shapes_must_agree():
    with pytest.raises(DimensionError):
        ExternalAttentionBlock(Tensor(np.zeros((3, 4))), Tensor(np.zeros((4, 3))))


def test_single_roi_row_sums_to_one(rng):
    a = attention_scores(Tensor(rng.normal(size=(1, 32))), block(rng, 10, 32)).values
    assert abs(a.sum(dtype=np.float64) - 1.0) < 1e-6


def test_zero_input_gives_uniform_rows(rng):
    a = attention_scores(Tensor(np.zeros((5, 16))), block(rng, 4, 16)).values
    np.testing.assert_allclose(a, 0.25, atol=1e-7)


def test_scores_match_scalar_reference(rng):
    x = rng.normal(size=(12, 32)).astype(np.float32)
    b = block(rng, 10, 32)
    got = attention_scores(Tensor(x), b).values
    scores = reference.matmul(x, b.mem_key.values.T)
    np.testing.assert_allclose(got, reference.double_normalize(scores), atol=1e-5)


def test_scores_reject_wrong_length(rng):
    with pytest.raises(DimensionError):
        attention_scores(Tensor(np.zeros((3, 7))), block(rng, 2, 8))


def test_double_normalize_hand_cases():
    assert double_normalize(Tensor([[3.7]])).values.tolist() == [[1.0]]
    np.testing.assert_allclose(double_normalize(Tensor(np.zeros((2, 2)))).values, 0.5)
    ln2 = math.log(2)
    out = double_normalize(Tensor([[ln2, 0.0], [0.0, ln2]])).values
    np.testing.assert_allclose(out, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-6)
    np.testing.assert_allclose(out, reference.double_normalize([[ln2, 0.0], [0.0, ln2]]), atol=1e-7)


def test_softmax_stage_normalizes_columns(rng):
    scores = Tensor(rng.normal(size=(9, 5)))
    cols = T.softmax_dim(scores, 0).values
    np.testing.assert_allclose(cols.sum(axis=0, dtype=np.float64), 1.0, atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 24), st.integers(1, 24)), elements=st.floats(-50, 50, width=32)))
def test_double_normalize_rows_are_stochastic(scores):
    a = double_normalize(Tensor(scores)).values.astype(np.float64)
    assert (a >= 0).all()
    mass = T.softmax_dim(Tensor(scores), 0).values.sum(axis=1, dtype=np.float64)
    # the additive eps only bites on rows whose softmax mass is itself tiny
    np.testing.assert_allclose(a.sum(axis=1), mass / (mass + 1e-9), atol=1e-6)
    ok = mass >= 1e-4
    np.testing.assert_allclose(a.sum(axis=1)[ok], 1.0, atol=1e-5)


def test_zero_value_memory_is_identity(rng):
    b = block(rng, 6, 20)
    b.mem_value.values[:] = 0
    x = Tensor(rng.normal(size=(4, 20)))
    np.testing.assert_array_equal(attention_forward(x, b).values, x.values)


def test_single_roi_forward_definition(rng):
    b = block(rng, 5, 12)
    x = Tensor(rng.normal(size=(1, 12)))
    row = attention_scores(x, b).values
    np.testing.assert_allclose(attention_forward(x, b).values, row @ b.mem_value.values + x.values, atol=1e-6)


def test_forward_matches_scalar_reference(rng):
    x = rng.normal(size=(12, 32)).astype(np.float32)
    b = block(rng, 10, 32)
    want = reference.attention_forward(x, b.mem_key.values, b.mem_value.values)
    np.testing.assert_allclose(attention_forward(Tensor(x), b).values, want, atol=1e-5)


@pytest.mark.parametrize("trial", range(10))
def test_forward_oracle_small_sizes(trial):
    rng = np.random.default_rng(100 + trial)
    s, L, d = rng.integers(1, 17, 3)
    x = rng.normal(size=(s, L)).astype(np.float32)
    b = block(rng, d, L)
    want = reference.attention_forward(x, b.mem_key.values, b.mem_value.values)
    np.testing.assert_allclose(attention_forward(Tensor(x), b).values, want, atol=1e-5)


def test_stack_depth_zero_is_identity(rng):
    x = Tensor(rng.normal(size=(3, 2, 2, 2)))
    assert stack_forward(x, RoiAttentionStack([])) is x


def test_stack_depth_one_and_two_compose(rng):
    stack = RoiAttentionStack.init(4, 2 * 3 * 3, 2, rng)
    x = Tensor(rng.normal(size=(5, 2, 3, 3)))
    flat = T.reshape(x, (5, 18))
    one = stack_forward(x, RoiAttentionStack(stack.blocks[:1]))
    np.testing.assert_array_equal(one.values.reshape(5, 18), attention_forward(flat, stack.blocks[0]).values)
    two = stack_forward(x, stack).values.reshape(5, 18)
    manual = attention_forward(attention_forward(flat, stack.blocks[0]), stack.blocks[1]).values
    np.testing.assert_array_equal(two, manual)


def test_stack_rejects_wrong_length(rng):
    with pytest.raises(DimensionError):
        stack_forward(Tensor(np.zeros((2, 3, 2, 2))), RoiAttentionStack.init(2, 10, 1, rng))


def test_stack_with_zero_value_memories_is_identity(rng):
    stack = RoiAttentionStack.init(3, 12, 3, rng)
    for b in stack.blocks:
        b.mem_value.values[:] = 0
    x = Tensor(rng.normal(size=(4, 3, 2, 2)))
    np.testing.assert_array_equal(stack_forward(x, stack).values, x.values)


def test_permuting_rois_permutes_outputs(rng):
    stack = RoiAttentionStack.init(5, 16, 2, rng, np.float64)
    x = rng.normal(size=(7, 4, 2, 2))
    perm = rng.permutation(7)
    a = stack_forward(Tensor(x, dtype=np.float64), stack).values
    b = stack_forward(Tensor(x[perm], dtype=np.float64), stack).values
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


@pytest.mark.parametrize("depth", [1, 2])
def test_stack_gradients(rng, depth):
    stack = RoiAttentionStack.init(3, 8, depth, rng, np.float64)
    x = Tensor(rng.normal(size=(4, 2, 2, 2)), requires_grad=True, dtype=np.float64)
    params = stack.parameters()
    assert check_gradients(lambda x, *p: T.sum_all(stack_forward(x, stack)), [x, *params])
    assert check_gradients(lambda x, *p: stack_forward(x, stack), [x, *params])


def test_flop_counts():
    s, L, d = 100, 256, 10
    assert external_attention_flops(s, L, d) - 2 * s * d * L < 10 * s * d
    assert external_attention_flops(2 * s, L, d) == 2 * external_attention_flops(s, L, d)
    assert dense_attention_flops(s, L) >= 2 * s * s * L


def test_bench_output_format():
    rows = bench_attention([8, 16], L=16, d=4, repeats=2)
    text = format_bench(rows)
    lines = text.strip().splitlines()
    assert lines[0] == "variant,s,L,d,median_us"
    assert len(lines) == 5
    assert {l.split(",")[0] for l in lines[1:]} == {"external", "dense"}
    with pytest.raises(ValueError):
        bench_attention([])
