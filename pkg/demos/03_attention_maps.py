"""
One forward pass and its attention maps
=======================================

Builds a small model on the delayed synthetic ring, runs one window through
it and looks at the captured attention: geographic heads only look inside
the hop mask, semantic heads only at DTW neighbours, temporal heads across
the whole window.
"""

import numpy as np

from pdformer.data import Scaler, generate_synthetic, make_batch, make_samples
from pdformer.graph import geographic_mask, hop_distances, laplacian_embedding_basis
from pdformer.model import ModelConfig, PDFormer
from pdformer.patterns import daily_profiles, extract_windows, kshape_cluster, semantic_mask

tensor, net = generate_synthetic(N=6, days=2, delay_steps=2, seed=0)
samples = make_samples(tensor, T=12, T_prime=12, S=3)
scaler = Scaler.fit(tensor.values)

geo = geographic_mask(hop_distances(net), lam=1)
sem = semantic_mask(daily_profiles(tensor.values, None, tensor.slots_per_day), K=2).mask
basis = laplacian_embedding_basis(net, 4).vectors
patterns = kshape_cluster(extract_windows(tensor.values, 3), 8, seed=0).centroids

cfg = ModelConfig(N=6, C=1, d=32, L=2, lam=1, K=2, N_p=8)
model = PDFormer(cfg, geo, sem, basis, patterns, scaler)
print(f"model with {model.num_parameters():,} parameters")

# %%
batch = make_batch(samples[100:101], scaler)
captured = []
out = model.forward(batch.x, batch.meta, capture=captured)
print("forecast shape:", out.shape)

np.set_printoptions(precision=2, suppress=True)
geo_attn = captured[0]["geo"][0, -1, 0]  # layer 0, last time step, head 0
print("\ngeographic head, last step (rows sum to 1, zeros outside the mask):")
print(geo_attn)
print("mask:\n", geo)
print("\nsemantic head, last step:")
print(captured[0]["sem"][0, -1, 0])
print("\ntemporal head for node 0 (query step x key step), first 4 rows:")
print(captured[0]["t"][0, 0, 0][:4])
