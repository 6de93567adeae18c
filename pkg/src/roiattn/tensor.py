"""Dense float32 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient (and grad mode is on), the output keeps references to its parents and
a closure that maps the output gradient to the input gradients. Calling
``loss.backward()`` orders the recorded graph topologically and visits each
node exactly once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """An operator was configured with parameters that cannot produce a valid output."""


class NonFiniteError(FloatingPointError):
    """A forward result contained NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        if isinstance(values, Tensor):
            values = values.values
        self.values = np.ascontiguousarray(np.asarray(values, dtype=dtype or DEFAULT_DTYPE))
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values, dtype=self.values.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.values.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.values)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.values.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # small conveniences used in tests and model code
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same_dtype(*ts: Tensor) -> np.dtype:
    dt = ts[0].values.dtype
    for t in ts[1:]:
        if t.values.dtype != dt:
            raise TypeError(f"mixed dtypes {dt} and {t.values.dtype}")
    return dt


def _axis(dim: int, ndim: int) -> int:
    if not -ndim <= dim < ndim:
        raise DimensionError(f"dim {dim} out of range for rank {ndim}")
    return dim % ndim


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    _check_same_dtype(a, b)
    av, bv = a.values, b.values

    def backward(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _make(np.ascontiguousarray(x.values.T), (x,), lambda g: (g.T,), "transpose")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear bias shape {b.shape} does not match output width {w.shape[1]}")
    _check_same_dtype(x, w, b)
    xv, wv = x.values, w.values

    def backward(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0, dtype=np.float64).astype(g.dtype)

    return _make(xv @ wv + b.values, (x, w, b), backward, "linear")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)
    return _make(a.values + b.values, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.values.dtype.type(c)
    return _make(x.values * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sum_all(x: Tensor) -> Tensor:
    total = x.values.sum(dtype=np.float64)
    dt = x.values.dtype
    shape = x.shape
    return _make(np.asarray(total, dtype=dt), (x,), lambda g: (np.full(shape, g, dtype=dt),), "sum")


# ---------------------------------------------------------------- normalization


def softmax_dim(x: Tensor, dim: int) -> Tensor:
    ax = _axis(dim, x.ndim)
    with np.errstate(invalid="ignore", over="ignore"):
        shifted = x.values - x.values.max(axis=ax, keepdims=True)
        e = np.exp(shifted)
    y = (e / e.sum(axis=ax, keepdims=True, dtype=np.float64)).astype(x.dtype)

    def backward(g):
        dot = (g * y).sum(axis=ax, keepdims=True, dtype=np.float64)
        return ((g - dot) * y).astype(x.dtype, copy=False),

    return _make(y, (x,), backward, "softmax")


def l1_normalize_dim(x: Tensor, dim: int, eps: float = 1e-9) -> Tensor:
    """Divide each slice along ``dim`` by its sum plus ``eps`` (inputs nonnegative)."""
    ax = _axis(dim, x.ndim)
    denom = x.values.sum(axis=ax, keepdims=True, dtype=np.float64) + eps
    y = (x.values / denom).astype(x.dtype)

    def backward(g):
        dot = (g * x.values).sum(axis=ax, keepdims=True, dtype=np.float64)
        return (g / denom - dot / denom**2).astype(x.dtype),

    return _make(y, (x,), backward, "l1_normalize")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != x.values.size:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}")
    old = x.shape
    return _make(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the first."""
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    ndim = tensors[0].ndim
    ax = _axis(axis, ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat shape mismatch along axis {ax}: {ref} vs {t.shape}")
    _check_same_dtype(*tensors)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.values for t in tensors], axis=ax), tensors, backward, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis of C×H×W or N×C×H×W tensors."""
    return concat(tensors, axis=-3)


# ---------------------------------------------------------------- convolution and pooling


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv extent (size {size} + 2*{padding} - kernel {kernel}) / stride {stride} is not a nonnegative integer"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an N×C×H×W input with an O×C×kh×kw kernel (im2col + matmul)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match {weight.shape[0]} output channels")
    _check_same_dtype(x, weight, bias)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    xv = x.values
    if padding:
        xv = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == 1 and kw == 1:
        cols = xv[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(n * oh * ow, c)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xv, (kh, kw), axis=(2, 3))
        win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.values.reshape(o, -1)
    out = (cols @ wmat.T + bias.values).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    padded_shape = xv.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), (x, weight, bias), backward, "conv2d")


def avg_pool_global(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: N×C×H×W -> N×C."""
    if x.ndim != 4:
        raise DimensionError(f"avg_pool_global expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    y = x.values.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)
    inv = x.dtype.type(1.0 / (h * w))
    return _make(y, (x,), lambda g: (np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),), "avg_pool")


# ---------------------------------------------------------------- losses


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy shape mismatch: logits {logits.shape}, labels {labels.shape}")
    n = logits.shape[0]
    z = logits.values.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logsum - z[rows, labels]).sum() / max(n, 1)
    dt = logits.dtype

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / max(n, 1))).astype(dt),

    return _make(np.asarray(loss, dtype=dt), (logits,), backward, "cross_entropy")


def smooth_l1(pred: Tensor, target, weights=None, beta: float = 1.0, normalizer: float | None = None) -> Tensor:
    """Huber-style loss summed over coordinates, weighted per row, divided by ``normalizer``.

    ``normalizer`` defaults to the total row weight (or 1 when that is zero).
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise DimensionError(f"smooth_l1 shape mismatch: pred {pred.shape}, target {target.shape}")
    n = pred.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if normalizer is None:
        normalizer = float(w.sum()) or 1.0
    diff = pred.values.astype(np.float64) - target
    ad = np.abs(diff)
    quad = ad < beta
    per = np.where(quad, 0.5 * diff**2 / beta, ad - 0.5 * beta)
    wb = w.reshape((n,) + (1,) * (pred.ndim - 1))
    loss = (per * wb).sum() / normalizer
    dt = pred.dtype

    def backward(g):
        d = np.where(quad, diff / beta, np.sign(diff))
        return (d * wb * (float(g) / normalizer)).astype(dt),

    return _make(np.asarray(loss, dtype=dt), (pred,), backward, "smooth_l1")


# ---------------------------------------------------------------- optimizer


def sgd_step(
    params: Iterable[Tensor],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    state: dict | None = None,
) -> dict:
    """One momentum-SGD update: v <- m*v + g + wd*theta; theta <- theta - lr*v.

    ``state`` maps ``id(param)`` to its velocity buffer and is returned for reuse.
    """
    state = {} if state is None else state
    for p in params:
        if not p.requires_grad:
            continue
        g = p.grad + weight_decay * p.values
        v = state.get(id(p))
        v = g if v is None else momentum * v + g
        v = v.astype(p.values.dtype, copy=False)
        state[id(p)] = v
        p.values -= p.values.dtype.type(lr) * v
    return state


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def take(x: Tensor, index: int) -> Tensor:
    """``x[index]`` along the leading axis."""
    n = x.shape[0]
    if not -n <= index < n:
        raise DimensionError(f"index {index} out of range for leading extent {n}")
    shape, dt = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dt)
        full[index] = g
        return full,

    return _make(x.values[index].copy(), (x,), backward, "take")
