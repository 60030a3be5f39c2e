"""
Smoothing the percentile head
=============================

After every optimizer step, each output row for a percentile bin is
blended with its neighbours. The blend is a symmetric tridiagonal matrix
whose columns sum to one, so per-feature mass is conserved while the rows
drift towards each other.
"""

import numpy as np
import torch

from chagasnet.optim import smooth_bins, smoothing_matrix

B, T, F = 10, 2, 4
print(np.round(smoothing_matrix(5, 0.5), 3))

rng = np.random.default_rng(0)
W = torch.tensor(rng.normal(size=(B * T, F)))
mass = W.view(T, B, F).sum(1).clone()


def roughness(W):
    blocks = W.view(T, B, F)
    return float(((blocks[:, 1:] - blocks[:, :-1]) ** 2).sum())


# %%
# Repeated application flattens each block towards its mean row.
for step in range(0, 201):
    if step in (0, 1, 10, 50, 200):
        drift = float((W.view(T, B, F).sum(1) - mass).abs().max())
        print(f"step {step:3d}  roughness {roughness(W):8.4f}  mass drift {drift:.1e}")
    smooth_bins(W, 0.5, B, T)
