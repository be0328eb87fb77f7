"""
Semantic neighbours and short-term traffic patterns
===================================================

Generates a ring of sensors where two far-apart nodes share the same daily
profile. Dynamic time warping on mean daily profiles finds that pair even
though the road graph puts them on opposite sides, and k-Shape turns short
windows of the training data into a small dictionary of traffic shapes.
"""

import numpy as np

from pdformer.data import generate_similar_pattern
from pdformer.graph import hop_distances
from pdformer.patterns import daily_profiles, dtw_distance, extract_windows, kshape_cluster, semantic_mask

# %%
# DTW tolerates shifts that a lock-step distance would punish.
a = np.array([0.0, 0.0, 1.0, 2.0, 1.0, 0.0])
b = np.roll(a, 1)
print("lock-step L1:", np.abs(a - b).sum(), " DTW:", dtw_distance(a, b))

# %%
tensor, net = generate_similar_pattern(N=8, days=3, seed=0)
profiles = daily_profiles(tensor.values, tensor.missing, tensor.slots_per_day)
sem = semantic_mask(profiles, K=1)
print("\nhops between node 0 and node 4:", hop_distances(net)[0, 4])
print("semantic neighbour of node 0:", [j for j in np.flatnonzero(sem.mask[0]) if j != 0])

# %%
# Length-3 windows, z-normalized, clustered into 6 shapes.
windows = extract_windows(tensor.values, S=3, missing=tensor.missing)
patterns = kshape_cluster(windows, n_clusters=6, seed=0)
print(f"\n{len(windows)} windows -> {patterns.n_patterns} patterns")
print("objective per iteration:", np.round(patterns.objective_history, 1))
np.set_printoptions(precision=2, suppress=True)
print("centroids:\n", patterns.centroids)
print("cluster sizes:", np.bincount(patterns.labels, minlength=6))
