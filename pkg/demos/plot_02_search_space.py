"""
The architecture matrix and its genotype
========================================

A cell has 14 candidate edges and 8 candidate operations. Appending the three
squeeze-excitation connections adds three rows and three new operation
columns, giving a 17 x 11 matrix in which only the top-left block is learned.
"""

import numpy as np

from fdarts.genotype import derive_genotype, genotype_to_dot, serialize_genotype
from fdarts.network import NetworkConfig, expected_param_count
from fdarts.search_space import ATTENTION_SPEC, CellSpec, build_arch_matrix

rng = np.random.default_rng(0)
normal = build_arch_matrix(CellSpec("normal"), ATTENTION_SPEC, rng, init_scale=1.0)
reduce = build_arch_matrix(CellSpec("reduction"), ATTENTION_SPEC, rng, init_scale=1.0)

print("shape:", normal.shape)
print("columns:", normal.column_ops)
print("learnable entries:", int(normal.learnable_mask.sum()), "of", normal.values.data.size)
print("fixed rows read back:", {f"{c.source}->{c.dest}": op for c, op in normal.fixed_ops().items()})

###############################################################################
# Discretising: two strongest incoming edges per node, each with its strongest
# non-zero operation.

g = derive_genotype(normal, reduce)
print(serialize_genotype(g))

# adding a constant to a row changes nothing
normal.values.data[3, :8] += 5.0
assert derive_genotype(normal, reduce) == g

print(genotype_to_dot(g)["normal"])

cfg = NetworkConfig(n_cells=8, init_channels=8, n_classes=10, input_shape=(1, 28, 28), mode="eval")
print("parameters of the 8-cell network:", expected_param_count(cfg, g))
