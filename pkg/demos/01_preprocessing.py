"""
From a raw 12-lead record to a model snippet
=============================================

A synthetic 500 Hz record is resampled to 400 Hz, reduced to the eight
independent leads, and cut into a standardized two-second window.
"""

import numpy as np

from chagasnet.ingest import SyntheticConfig, generate_synthetic
from chagasnet.preprocess import PreprocessConfig, extract_snippet, prepare, standardize

records, labs, labels = generate_synthetic(SyntheticConfig(n_patients=4, n_ecgs=8, seed=0))
raw = records[0]
print(raw.record_id, raw.signal.shape, raw.fs, "Hz", raw.lead_names)

# %%
# Resampling keeps a 10 s record at 10 s; the derived limb leads are dropped.
cfg = PreprocessConfig()
ready = prepare(raw, cfg)
print("prepared:", ready.signal.shape, ready.fs, "Hz", ready.lead_names)

# %%
# Training draws a random 800-sample window per epoch; each window is
# standardized with one mean and one std over all of its leads.
rng = np.random.default_rng(0)
for _ in range(3):
    snip = standardize(extract_snippet(ready, rng, cfg.snippet_len))
    print(f"start {snip.start_sample:5d}  mean {snip.data.mean():+.2e}  std {snip.data.std():.4f}")
