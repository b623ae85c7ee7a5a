"""
Pixel graphs and flat-batch message passing
===========================================

Build the two graph families, inspect their degrees, and check that one
GraphSAGE pass over a whole batch matches a loop over single images.
"""

import numpy as np

from graphdepth.gnn import SageLayerParams, sage_forward
from graphdepth.graphbuild import KnnParams, build_batched, build_grid, build_knn, grid_coords, grid_edge_count
from graphdepth.tensorcore import Tensor

# 8-connected grid on a 4x5 map: corners have 3 neighbours, edges 5, interior 8
grid = build_grid(4, 5, connectivity=8)
print("grid8 edges:", grid.n_edges, "closed form:", grid_edge_count(4, 5, 8))
print("degrees:\n", grid.degrees().reshape(4, 5))

# k-NN over features and pixel position; features are L2-normalised first
rng = np.random.default_rng(0)
feats = rng.standard_normal((16, 6))
knn = build_knn(feats, grid_coords(4, 4), KnnParams(k=4))
print("knn in-degree is always k:", set(knn.degrees()))

# Flat batch: node ids of image m are offset by m * H * W
X = rng.standard_normal((3, 8, 6, 6))
params = SageLayerParams.init(8, 4, rng)
flat = sage_forward(Tensor(X), build_batched("grid8", 6, 6, 3), params).data
single = build_batched("grid8", 6, 6, 1)
loop = np.concatenate([sage_forward(Tensor(X[m:m + 1]), single, params).data for m in range(3)])
print("flat batch vs loop, max abs diff:", np.abs(flat - loop).max())
