"""
Biomarker targets: temporal join and percentile bins
=====================================================

Lab draws within 24 hours of an ECG become per-record targets. Each
biomarker's values are cut into equal-probability bins fitted on the
training split only.
"""

import numpy as np

from chagasnet.binning import PercentileBinner, match_labs
from chagasnet.ingest import BIOMARKERS, SyntheticConfig, generate_synthetic

records, labs, _ = generate_synthetic(SyntheticConfig(n_patients=32, n_ecgs=128, seed=3))
matched, n_excluded = match_labs(records, labs, BIOMARKERS, window_h=24)
print(f"{n_excluded} of {len(records)} ECGs had no lab draw within 24 h")
table = np.array(list(matched.values()))  # [ECGs x biomarkers], NaN where missing
for k, name in enumerate(BIOMARKERS[:4]):
    print(f"{name:16s} present for {np.isfinite(table[:, k]).sum():3d} of {len(matched)} ECGs")

# %%
# Ten bins per biomarker; a value maps to the number of edges strictly below it.
columns = {name: table[np.isfinite(table[:, k]), k] for k, name in enumerate(BIOMARKERS)}
binner = PercentileBinner.fit(columns, n_bins=10)
print("Albumin edges:", np.round(binner.edges["Albumin"], 3))
print("bin counts:   ", np.bincount(binner.assign_many("Albumin", columns["Albumin"]), minlength=10))
