import io

import numpy as np
import pytest

from roiattn import checkpoint, reference
from roiattn import tensor as T
from roiattn.gradcheck import check_gradients
from roiattn.tensor import ConfigurationError, DimensionError, NonFiniteError, Tensor

from conftest import leaf64


def arr(t):
    return np.asarray(t.values)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    assert arr(out).tolist() == [[3, 4], [5, 6]]


def test_matmul_row_times_column():
    assert arr(T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]]))).tolist() == [[11]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("n", [1, 3, 7, 12])
def test_matmul_matches_triple_loop(rng, n):
    a, b = rng.normal(size=(n, n)).astype(np.float32), rng.normal(size=(n, n)).astype(np.float32)
    np.testing.assert_allclose(arr(T.matmul(Tensor(a), Tensor(b))), reference.matmul(a, b), atol=1e-5)


def test_matmul_gradient(rng):
    a, b = leaf64(rng, 7, 5), leaf64(rng, 5, 3)
    assert check_gradients(T.matmul, [a, b])


def test_float32_default_and_finite_guard():
    t = Tensor([1.0, 2.0])
    assert t.dtype == np.float32
    with pytest.raises(NonFiniteError):
        T.softmax_dim(Tensor([np.inf, 0.0]), 0)


# ---------------------------------------------------------------- softmax / l1


def test_softmax_uniform():
    np.testing.assert_allclose(arr(T.softmax_dim(Tensor(np.zeros(4)), 0)), [0.25] * 4)


def test_softmax_is_stabilized():
    np.testing.assert_allclose(arr(T.softmax_dim(Tensor([1000.0, 1000.0]), 0)), [0.5, 0.5])


def test_softmax_columns_sum_to_one(rng):
    y = arr(T.softmax_dim(Tensor(rng.normal(size=(6, 6))), 0))
    np.testing.assert_allclose(y.sum(axis=0, dtype=np.float64), 1.0, atol=1e-6)
    assert (y > 0).all()


def test_softmax_rejects_bad_axis():
    with pytest.raises(DimensionError):
        T.softmax_dim(Tensor(np.zeros((2, 2))), 2)


def test_l1_normalize_cases(rng):
    np.testing.assert_allclose(arr(T.l1_normalize_dim(Tensor([2.0, 2.0]), 0)), [0.5, 0.5])
    assert arr(T.l1_normalize_dim(Tensor([0.0, 0.0]), 0, eps=1e-9)).tolist() == [0.0, 0.0]
    y = arr(T.l1_normalize_dim(Tensor(rng.uniform(size=(5, 8))), 1))
    np.testing.assert_allclose(y.sum(axis=1, dtype=np.float64), 1.0, atol=1e-5)


# ---------------------------------------------------------------- conv2d


def test_conv_1x1_identity(rng):
    x = Tensor(rng.normal(size=(2, 1, 5, 5)))
    out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(arr(out), arr(x))


def test_conv_all_ones_3x3():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1) and arr(out).item() == 9.0


def test_conv_output_extent_and_config_error():
    x = Tensor(np.zeros((1, 2, 8, 8)))
    out = T.conv2d(x, Tensor(np.zeros((3, 2, 4, 4))), Tensor(np.zeros(3)), stride=2, padding=1)
    assert out.shape == (1, 3, 4, 4)
    with pytest.raises(ConfigurationError):
        T.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.zeros(3)), stride=2, padding=1)


def test_conv_matches_direct_loops(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = arr(T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64), 1, 1))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 6))
    for n in range(2):
        for o in range(4):
            for i in range(6):
                for j in range(6):
                    ref[n, o, i, j] = (xp[n, :, i : i + 3, j : j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_conv_weight_gradient_of_sum_loss(rng):
    x = Tensor(rng.normal(size=(2, 3, 8, 8)), dtype=np.float64)
    w, b = leaf64(rng, 4, 3, 3, 3), leaf64(rng, 4)
    assert check_gradients(lambda w, b: T.sum_all(T.conv2d(x, w, b, 1, 1)), [w, b])


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 4), (1, 0, 1)])
def test_conv_gradients(rng, stride, pad, k):
    x, w, b = leaf64(rng, 2, 3, 6, 6), leaf64(rng, 2, 3, k, k), leaf64(rng, 2)
    assert check_gradients(lambda x, w, b: T.conv2d(x, w, b, stride, pad), [x, w, b])


# ---------------------------------------------------------------- linear and small ops


def test_linear_cases(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(arr(T.linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))), arr(x))
    assert arr(T.linear(Tensor([[1, 1]]), Tensor([[1], [2]]), Tensor([3]))).tolist() == [[6]]
    assert check_gradients(T.linear, [leaf64(rng, 4, 6), leaf64(rng, 6, 2), leaf64(rng, 2)])


def test_relu_cases(rng):
    assert arr(T.relu(Tensor([-1.0, 0.0, 2.0]))).tolist() == [0.0, 0.0, 2.0]
    x = Tensor(rng.normal(size=(3, 3)))
    assert (arr(T.relu(x)) >= 0).all()
    assert check_gradients(T.relu, [leaf64(rng, 4, 5, low=0.05)])


def test_avg_pool_global_cases(rng):
    assert arr(T.avg_pool_global(Tensor(np.full((1, 2, 3, 3), 4.0)))).tolist() == [[4.0, 4.0]]
    x = rng.normal(size=(2, 3, 4, 5))
    np.testing.assert_allclose(arr(T.avg_pool_global(Tensor(x))), x.mean(axis=(2, 3)), atol=1e-6)
    assert check_gradients(T.avg_pool_global, [leaf64(rng, 2, 3, 4, 5)])


def test_add_cases(rng):
    assert arr(T.add(Tensor([1.0]), Tensor([2.0]))).tolist() == [3.0]
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    assert check_gradients(T.add, [leaf64(rng, 3, 4), leaf64(rng, 3, 4)])


def test_concat_channels_cases(rng):
    a, b = Tensor(np.zeros((2, 3, 3))), Tensor(np.ones((1, 3, 3)))
    out = T.concat_channels([a, b])
    assert out.shape == (3, 3, 3) and arr(out)[2].sum() == 9
    with pytest.raises(DimensionError):
        T.concat_channels([a, Tensor(np.zeros((1, 4, 3)))])
    assert check_gradients(lambda a, b: T.concat_channels([a, b]), [leaf64(rng, 2, 3, 4, 4), leaf64(rng, 2, 2, 4, 4)])


def test_reshape_and_flatten(rng):
    x = Tensor(np.arange(24))
    assert T.reshape(x, (2, 3, 4)).shape == (2, 3, 4)
    assert T.flatten(T.reshape(x, (2, 3, 4))).shape == (2, 12)
    with pytest.raises(DimensionError):
        T.reshape(x, (5, 5))
    assert check_gradients(lambda x: T.flatten(x), [leaf64(rng, 2, 3, 2, 2)])


def test_cross_entropy_cases(rng):
    ce = T.cross_entropy_with_logits(Tensor(np.zeros((3, 5))), [0, 1, 4])
    assert abs(float(ce.values) - np.log(5)) < 1e-6
    confident = np.full((2, 3), -1e3)
    confident[[0, 1], [2, 0]] = 1e3
    assert float(T.cross_entropy_with_logits(Tensor(confident), [2, 0]).values) < 1e-6
    labels = rng.integers(0, 4, 6)
    assert check_gradients(lambda z: T.cross_entropy_with_logits(z, labels), [leaf64(rng, 6, 4)])


def test_smooth_l1_cases(rng):
    assert float(T.smooth_l1(Tensor([[0.5]]), [[0.0]]).values) == pytest.approx(0.125)
    assert float(T.smooth_l1(Tensor([[3.0]]), [[0.0]]).values) == pytest.approx(2.5)
    target = rng.normal(size=(5, 4))
    weights = np.array([1, 0, 1, 1, 0.0])
    assert check_gradients(lambda p: T.smooth_l1(p, target, weights), [leaf64(rng, 5, 4)])


def test_diamond_graph_accumulates_both_paths(rng):
    x = leaf64(rng, 3, 3)

    def diamond(x):
        y = T.relu(x)
        return T.add(T.matmul(y, y), T.softmax_dim(x, 1))

    x.values[:] = np.sign(x.values) * (np.abs(x.values) + 0.05)
    assert check_gradients(diamond, [x])


def test_backward_visits_each_node_once(rng):
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.add(x, x)
    T.sum_all(T.add(y, y)).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 4.0, 4.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.add(x, x)
    assert not y.requires_grad


# ---------------------------------------------------------------- sgd


def test_sgd_scalar_hand_formula():
    p = Tensor([2.0], requires_grad=True, dtype=np.float64)
    v, theta = 0.0, 2.0
    state = {}
    for g in (0.5, -1.0, 0.25):
        p.grad = np.array([g])
        T.sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.01, state=state)
        v = 0.9 * v + g + 0.01 * theta
        theta = theta - 0.1 * v
        assert p.values[0] == pytest.approx(theta, abs=1e-12)


def test_sgd_zero_lr_is_noop(rng):
    p = Tensor(rng.normal(size=4), requires_grad=True)
    before = p.values.copy()
    p.grad = np.ones(4, dtype=np.float32)
    T.sgd_step([p], lr=0.0, momentum=0.9, weight_decay=1e-4)
    np.testing.assert_array_equal(p.values, before)


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_layout_is_bit_exact():
    blob = checkpoint.dumps({"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    expected = (
        b"RATN1\n"
        + (1).to_bytes(4, "little") + b"w"
        + (2).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        + np.array([1.0, 2.0], dtype="<f4").tobytes()
    )
    assert blob == expected


def test_checkpoint_round_trip(rng):
    params = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32), "b": np.zeros(2, np.float32), "ü": np.ones((1, 1, 2), np.float32)}
    back = checkpoint.loads(checkpoint.dumps(params))
    assert list(back) == list(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])


def test_checkpoint_rejects_unknown_magic():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.read(io.BytesIO(b"RATN2\n"))
