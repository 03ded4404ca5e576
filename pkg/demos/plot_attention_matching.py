"""
Blending source and edit attention
==================================

During editing, every spatial self-attention row of the edit run is
compared with the matching row recorded while inverting the source.
Rows that barely changed are pulled back toward the source; rows that
changed a lot keep the edit. Temporal attention follows a step schedule.
"""

import numpy as np
import torch

from ffedit.matching import EditRunConfig, spatial_diff, spatial_match, temporal_select

rng = np.random.default_rng(0)
src = rng.dirichlet(np.ones(6), size=4)
edit = src.copy()
edit[1] = rng.dirichlet(np.ones(6))        # one query row changes a lot
edit[2] = 0.9 * src[2] + 0.1 / 6           # one changes a little

# half the L1 distance between rows: 0 for identical rows, 1 for disjoint ones
diff = spatial_diff(src, edit)
print("row differences:", diff.numpy().round(3))

for thr in (0.0, 0.35, 1.0):
    w = spatial_match(src, edit, thr)
    moved = (w - torch.from_numpy(src)).abs().sum(-1).numpy()
    print(f"thr={thr:4.2f}  distance of blended rows from source: {moved.round(3)}")

# temporal schedule for the three presets, at a coarse (4) and a fine (2) site
for preset in ("local", "style", "shape"):
    cfg = EditRunConfig(preset=preset)
    line = "".join("R" if temporal_select(s, 25, 4, cfg) == "replace" else "." for s in range(25))
    fine = "".join("R" if temporal_select(s, 25, 2, cfg) == "replace" else "." for s in range(25))
    print(f"{preset:>6}  factor 4: {line}")
    print(f"{'':>6}  factor 2: {fine}")
