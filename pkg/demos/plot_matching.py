"""
Raw matching and the truncated cost volume
==========================================

A synthetic speckle pair is matched with the coarse-to-fine ZNCC matcher.
The raw disparity is integer-valued, so even correct matches carry up to
half a pixel of error; the truncated cost volume around it is what the
refinement network later reads.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from semidense.datagen import SceneConfig, gen_disparity, render_pair
from semidense.matcher import MatchConfig, match_hierarchical, truncate_volume

###############################################################################
# Render a scene with planes, boxes and bumps.

cfg = SceneConfig(seed=3, width=192, height=144, d_min=8, d_max=40)
pair = render_pair(gen_disparity(cfg), cfg)

###############################################################################
# Match it. Pixels without texture, with a negative best score or whose
# match would fall outside the right image come back invalid.

mc = MatchConfig(d_max=40)
d_raw = match_hierarchical(pair.left, pair.right, mc)
both = d_raw.valid & pair.gt.valid
err = np.abs(d_raw.disparity - pair.gt.disparity)[both]
print(f"valid: {d_raw.valid.mean():.1%} of pixels")
print(f"raw MAE on valid pixels: {err.mean():.3f} px, within 1 px: {(err <= 1).mean():.1%}")

###############################################################################
# The truncated volume holds the ZNCC score at d_raw + k for k in [-3, 3].
# At a correct match the centre slice is the largest.

vol = truncate_volume(pair.left, pair.right, d_raw, 3, mc.radius, mc.d_max)
y, x = np.argwhere(both)[len(np.argwhere(both)) // 2]
print(f"scores around pixel ({y}, {x}):", np.round(vol.slices[:, y, x], 3))

fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
axes[0].imshow(pair.left.data, cmap="gray")
axes[0].set_title("left image")
axes[1].imshow(np.where(pair.gt.valid, pair.gt.disparity, np.nan), cmap="viridis")
axes[1].set_title("ground truth")
axes[2].imshow(np.where(d_raw.valid, d_raw.disparity, np.nan), cmap="viridis")
axes[2].set_title("raw disparity")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig("matching.png", dpi=90)
