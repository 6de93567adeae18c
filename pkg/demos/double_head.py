"""
Double head with shared RoI attention
=====================================

Classification runs attention -> two fc layers. Regression runs attention ->
two conv bottlenecks -> global average pool -> linear. Both branches use the
same attention stack.
"""

import numpy as np

from roiattn import tensor as T
from roiattn.head import DoubleHeadParams, HeadConfig, head_forward
from roiattn.tensor import Tensor

# the full-size channel plan
print(DoubleHeadParams.init(HeadConfig(channels=8, roi_size=1), np.random.default_rng(0)).channel_plan())

cfg = HeadConfig(channels=8, roi_size=7, num_classes=4, fc_hidden=64, reg_mid=16, reg_out=32, d=10, depth=1)
rng = np.random.default_rng(0)
head = DoubleHeadParams.init(cfg, rng)
cls_rois = Tensor(rng.normal(size=(5, 8, 7, 7)))
reg_rois = Tensor(rng.normal(size=(5, 8, 7, 7)))

out = head_forward(cls_rois, reg_rois, head)
print("logits", out.class_logits.shape, "deltas", out.box_deltas.shape)

# the shared memories collect gradient from both branches
loss = T.add(T.sum_all(out.class_logits), T.sum_all(out.box_deltas))
loss.backward()
for name, p in head.named_parameters().items():
    if ".attn." in name:
        print(name, "grad norm", float(np.linalg.norm(p.grad)))
