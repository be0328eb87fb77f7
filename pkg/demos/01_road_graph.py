"""
Road graphs, hop masks and Laplacian node embeddings
====================================================

Builds the 8-neighbour grid graphs used for region-level datasets, checks
their edge counts, derives a geographic attention mask from hop distances,
and computes the Laplacian eigenvector basis that gives each node a
position in the graph.
"""

import numpy as np

from pdformer.graph import (
    geographic_mask,
    grid_to_graph,
    hop_distances,
    laplacian_embedding_basis,
    ring_graph,
)

# %%
# Grid graphs: each cell connects to its 8 neighbours in both directions.
for rows, cols in [(15, 5), (15, 18), (32, 32)]:
    net = grid_to_graph(rows, cols)
    print(f"{rows:>2}x{cols:<2} grid: {net.node_count:5d} nodes, {len(net.edges):5d} directed edges")

# %%
# Hop distances on a small ring, and the mask that keeps pairs within 2 hops.
ring = ring_graph(7)
dist = hop_distances(ring)
print("\nhop distances from node 0:", dist[0].tolist())
mask = geographic_mask(dist, lam=2)
print("geographic mask (lambda=2):")
print(mask)

# %%
# Smallest non-trivial eigenvectors of the normalized Laplacian. On a ring they
# are discrete sines and cosines, so neighbouring nodes get similar vectors.
basis = laplacian_embedding_basis(ring, k=2)
np.set_printoptions(precision=3, suppress=True)
print("\neigenvalues:", basis.eigenvalues)
print("node embeddings:\n", basis.vectors)
