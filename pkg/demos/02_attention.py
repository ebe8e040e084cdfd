"""Masked attention, its dense special case, and why a shift breaks it.

Run: python demos/02_attention.py
"""

import numpy as np

from hstsar import tensor as T
from hstsar.attention import AttentionParams, attend
from hstsar.topology import build_topology, full_topology, roll_topology_input_indices

rng = np.random.default_rng(0)
params = AttentionParams.init(8, 2, rng)
x = rng.normal(size=(9, 8))

# With every token global the sparse mask is the full one.
dense = attend(T.Tensor(x), params, full_topology(9)).values.data
all_global = attend(T.Tensor(x), params, build_topology(9, g=9, w=1)).values.data
print("all-global vs dense max |diff|:", np.abs(dense - all_global).max())

# Dense attention has no notion of position, so rolling the input rolls the output.
perm = roll_topology_input_indices(full_topology(9), 1)
shifted = attend(T.Tensor(x[perm]), params, full_topology(9)).values.data
print("dense roll commutes:", np.allclose(shifted, dense[perm]))

# Block boundaries are fixed positions; shifting moves tokens across them.
topo = build_topology(9, g=1, w=2)
a = attend(T.Tensor(x[perm]), params, topo).values.data
b = attend(T.Tensor(x), params, topo).values.data[perm]
print("sparse roll commutes:", np.allclose(a, b), f"(max |diff| {np.abs(a - b).max():.3f})")
