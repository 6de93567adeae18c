"""External attention across the RoIs of one image.

Scores against a small learnable key memory are double-normalized (softmax over
the RoI axis, then L1 over the memory axis), mixed through a value memory and
added back to the input. Blocks stack to any depth.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

L1_EPS = 1e-9


@dataclass
class ExternalAttentionBlock:
    """Key and value memories, both d×L."""

    mem_key: Tensor
    mem_value: Tensor

    def __post_init__(self):
        if self.mem_key.shape != self.mem_value.shape or self.mem_key.ndim != 2:
            raise DimensionError(
                f"memory units must share a d×L shape, got {self.mem_key.shape} and {self.mem_value.shape}"
            )
        if min(self.mem_key.shape) < 1:
            raise DimensionError(f"d and L must be >= 1, got {self.mem_key.shape}")

    @property
    def d(self) -> int:
        return self.mem_key.shape[0]

    @property
    def L(self) -> int:
        return self.mem_key.shape[1]

    @classmethod
    def init(cls, d: int, L: int, rng: np.random.Generator, dtype=np.float32) -> "ExternalAttentionBlock":
        std = 1.0 / np.sqrt(L)
        return cls(
            Tensor(rng.normal(0.0, std, (d, L)), requires_grad=True, dtype=dtype),
            Tensor(rng.normal(0.0, std, (d, L)), requires_grad=True, dtype=dtype),
        )

    def parameters(self) -> list[Tensor]:
        return [self.mem_key, self.mem_value]


@dataclass
class RoiAttentionStack:
    blocks: list[ExternalAttentionBlock] = field(default_factory=list)

    def __post_init__(self):
        if len({b.L for b in self.blocks}) > 1:
            raise DimensionError("all blocks in a stack must share L")

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @classmethod
    def init(cls, d: int, L: int, depth: int, rng: np.random.Generator, dtype=np.float32) -> "RoiAttentionStack":
        return cls([ExternalAttentionBlock.init(d, L, rng, dtype) for _ in range(depth)])

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    def named_parameters(self, prefix: str = "attn") -> dict[str, Tensor]:
        out = {}
        for i, b in enumerate(self.blocks):
            out[f"{prefix}.{i}.mem_key"] = b.mem_key
            out[f"{prefix}.{i}.mem_value"] = b.mem_value
        return out


def double_normalize(scores: Tensor) -> Tensor:
    """Softmax over RoIs (axis 0) so columns sum to 1, then L1 over memory slots (axis 1)."""
    return T.l1_normalize_dim(T.softmax_dim(scores, 0), 1, eps=L1_EPS)


def attention_scores(x: Tensor, block: ExternalAttentionBlock) -> Tensor:
    if x.ndim != 2 or x.shape[1] != block.L:
        raise DimensionError(f"RoI features {x.shape} do not match memory length L={block.L}")
    if x.shape[0] < 1:
        raise DimensionError("attention needs at least one RoI")
    return double_normalize(T.matmul(x, T.transpose(block.mem_key)))


def attention_forward(x: Tensor, block: ExternalAttentionBlock) -> Tensor:
    attn = attention_scores(x, block)
    return T.add(T.matmul(attn, block.mem_value), x)


def stack_forward(x: Tensor, stack: RoiAttentionStack) -> Tensor:
    """Apply every block to s×c×h×w RoI features flattened to s×L; returns the original shape."""
    if not stack.blocks:
        return x
    shape = x.shape
    L = int(np.prod(shape[1:]))
    if L != stack.blocks[0].L:
        raise DimensionError(f"RoI features {shape} flatten to L={L}, memory expects L={stack.blocks[0].L}")
    h = T.reshape(x, (shape[0], L))
    for block in stack.blocks:
        h = attention_forward(h, block)
    return T.reshape(h, shape)


# ---------------------------------------------------------------- complexity benchmark


def dense_self_attention(x: Tensor) -> Tensor:
    """Plain s×s dot-product self-attention with a residual, for comparison only."""
    L = x.shape[1]
    scores = T.scale(T.matmul(x, T.transpose(x)), 1.0 / np.sqrt(L))
    return T.add(T.matmul(T.softmax_dim(scores, 1), x), x)


def external_attention_flops(s: int, L: int, d: int) -> int:
    """Multiply-accumulates of both memory products plus the s×d normalization work."""
    # softmax: max, sub, exp, sum, div; L1: sum, div
    return 2 * s * d * L + 7 * s * d


def dense_attention_flops(s: int, L: int) -> int:
    """Same accounting for plain self-attention: the s×s score and mixing products dominate."""
    return 2 * s * s * L + 5 * s * s


@dataclass
class BenchRow:
    variant: str
    s: int
    L: int
    d: int
    median_us: float

    def csv(self) -> str:
        return f"{self.variant},{self.s},{self.L},{self.d},{self.median_us:.3f}"


BENCH_HEADER = "variant,s,L,d,median_us"


def _median_time(fn, repeats: int) -> float:
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples) * 1e6


def bench_attention(s_values, L: int = 256, d: int = 10, repeats: int = 7, seed: int = 0) -> list[BenchRow]:
    """Median forward wall-time of external vs dense attention at each RoI count."""
    s_values = list(s_values)
    if not s_values:
        raise ValueError("s range is empty")
    rng = np.random.default_rng(seed)
    block = ExternalAttentionBlock.init(d, L, rng)
    rows = []
    with T.no_grad():
        for s in s_values:
            x = Tensor(rng.normal(size=(s, L)))
            rows.append(BenchRow("external", s, L, d, _median_time(lambda: attention_forward(x, block), repeats)))
            rows.append(BenchRow("dense", s, L, d, _median_time(lambda: dense_self_attention(x), repeats)))
    return rows


def format_bench(rows: list[BenchRow]) -> str:
    return "\n".join([BENCH_HEADER] + [r.csv() for r in rows]) + "\n"


def growth_ratios(rows: list[BenchRow], variant: str) -> list[tuple[int, int, float]]:
    """(s, next s, time ratio) for consecutive rows of one variant."""
    sel = sorted((r for r in rows if r.variant == variant), key=lambda r: r.s)
    return [(a.s, b.s, b.median_us / a.median_us) for a, b in zip(sel, sel[1:])]
