"""
Coordinate channels for the regression branch
=============================================

Two channels holding col/W and row/H are appended to the feature map and a
shared 1x1 conv maps the C+2 channels back to C.
"""

import numpy as np

from roiattn.posenc import PosEncoder, encode, encode_levels, make_coord_maps
from roiattn.tensor import Tensor

maps = make_coord_maps(4, 5)
print("C_x\n", maps.cx)
print("C_y\n", maps.cy)

rng = np.random.default_rng(0)
enc = PosEncoder.init(channels=3, rng=rng, noise=0.0)

# initialized as an identity on features with zero weight on the coordinates
x = Tensor(rng.normal(size=(3, 4, 5)))
print("starts as a no-op:", np.allclose(encode(x, enc).values, x.values))

# route C_x into output channel 0
enc.weight.values[0] = 0
enc.weight.values[0, 3] = 1
print("channel 0 now equals C_x:", np.allclose(encode(x, enc).values[0], maps.cx))

# one encoder serves every level; coordinates are normalized per level
levels = [Tensor(rng.normal(size=(1, 3, 8, 8))), Tensor(rng.normal(size=(1, 3, 4, 4)))]
print([lvl.shape for lvl in encode_levels(levels, enc)])
