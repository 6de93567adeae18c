"""Central finite-difference gradient checks for tape functions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, mul, sum_all


@dataclass
class GradCheckResult:
    ok: bool
    max_abs_err: float
    worst: str

    def __bool__(self) -> bool:
        return self.ok


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float) -> np.ndarray:
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    rtol: float = 1e-3,
    atol: float = 1e-5,
    step: float = 1e-3,
    seed: int = 0,
) -> GradCheckResult:
    """Compare tape gradients of ``sum(w * fn(*inputs))`` against central differences.

    ``w`` is a fixed random weighting so normalized outputs still carry
    informative gradients. Inputs should be float64 leaf tensors with
    ``requires_grad=True``.
    """
    out = fn(*inputs)
    w = Tensor(np.random.default_rng(seed).normal(size=out.shape), dtype=out.dtype)

    def scalar() -> Tensor:
        o = fn(*inputs)
        return sum_all(mul(o, w)) if o.shape else o

    for t in inputs:
        t.zero_grad()
    scalar().backward()
    analytic = [t.grad.copy() for t in inputs]
    worst, worst_err, ok = "", 0.0, True
    for k, (t, ga) in enumerate(zip(inputs, analytic)):
        if not t.requires_grad:
            continue
        gn = numerical_gradient(lambda: float(scalar().values), t.values, step)
        err = np.abs(ga - gn)
        bound = atol + rtol * np.abs(gn)
        excess = err - bound
        i = int(np.argmax(excess))
        if excess.reshape(-1)[i] > 0:
            ok = False
        if err.max() >= worst_err:
            worst_err = float(err.max())
            worst = f"input {k} shape {t.shape}: analytic {ga.reshape(-1)[i]:.6g} numeric {gn.reshape(-1)[i]:.6g}"
    return GradCheckResult(ok, worst_err, worst)
