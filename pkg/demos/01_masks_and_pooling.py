"""
Boundary masks, pooling and unpooling
=====================================

A boundary mask marks which bytes open a new token.  The byte stack's
outputs at those positions become the token stack's inputs, and every byte
later reads back the token it belongs to.
"""

import numpy as np

from scoretok import tensor as T
from scoretok.evaluate import uniform_baseline_mask
from scoretok.model import boundary_positions, downsample, token_index, upsample

# eight bytes, tokens opening at 0, 1, 4 and 6
a = np.array([1, 1, 0, 0, 1, 0, 1, 0])
pos, m = boundary_positions(a)
print("mask      ", a)
print("positions ", pos, " M =", int(m))
print("token t(j)", token_index(a))

# pooling just gathers rows; unpooling adds each token's vector back onto its bytes
X = T.Tensor(np.arange(8.0)[:, None] * np.ones((1, 2)))
Xp = downsample(X, a)
print("pooled rows\n", Xp.data)
Y = upsample(Xp * 100.0, X, a)
print("unpooled (X + 100 * token row)\n", Y.data)

# %%
# The uniform baseline spaces boundaries evenly at the same average rate.
base = uniform_baseline_mask(20, 0.2)
print("uniform, 20 bytes at rate 1/5:", np.flatnonzero(base))
print("4096 bytes:", int(uniform_baseline_mask(4096, 0.2).sum()), "boundaries")
