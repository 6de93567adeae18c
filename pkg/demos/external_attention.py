"""
External attention over RoIs
============================

Each RoI feature attends to d learnable memory rows instead of to the other
RoIs, so the cost grows linearly with the number of RoIs.
"""

import numpy as np

from roiattn import tensor as T
from roiattn.attention import (
    ExternalAttentionBlock,
    RoiAttentionStack,
    attention_forward,
    attention_scores,
    bench_attention,
    format_bench,
    growth_ratios,
    stack_forward,
)
from roiattn.tensor import Tensor

rng = np.random.default_rng(0)
s, L, d = 6, 32, 10

# memories M_k, M_v are d x L; scores are softmax over RoIs then L1 over memory slots
block = ExternalAttentionBlock.init(d, L, rng)
x = Tensor(rng.normal(size=(s, L)))
A = attention_scores(x, block).values
print("attention map", A.shape)
print("row sums", A.sum(axis=1).round(6))
print("softmax column sums", T.softmax_dim(T.matmul(x, T.transpose(block.mem_key)), 0).values.sum(axis=0).round(6))

# with a zero value memory the residual makes the block an identity
block.mem_value.values[:] = 0
print("identity when M_v = 0:", np.array_equal(attention_forward(x, block).values, x.values))

# stacks act on s x C x h x w RoI tensors, flattening each RoI
stack = RoiAttentionStack.init(d, 2 * 4 * 4, depth=2, rng=rng)
rois = Tensor(rng.normal(size=(s, 2, 4, 4)))
print("stack output", stack_forward(rois, stack).shape)

# runtime against dense RoI-to-RoI self-attention
rows = bench_attention([128, 256, 512], L=256, d=10, repeats=3)
print(format_bench(rows))
for variant in ("external", "dense"):
    print(variant, [f"{r:.2f}x" for _, _, r in growth_ratios(rows, variant)])
