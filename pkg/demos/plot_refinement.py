"""
Refining disparity and flagging outliers
========================================

A small model is trained for a few minutes on synthetic pairs, then used
to refine a held-out pair. The likelihood schedule is compressed so that
the outlier branch starts learning after a handful of epochs; p_out keeps
falling on good pixels for as long as training continues.
"""

import logging
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from semidense.bayes import StochasticConfig
from semidense.datagen import SceneConfig, gen_dataset
from semidense.evaluation import metrics_report
from semidense.refiner import forward, mc_predict
from semidense.trainer import TrainConfig, load_dataset, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
root = Path(tempfile.mkdtemp())

###############################################################################
# Thirty-two training pairs and one test pair at 128 x 128.

scene = SceneConfig(width=128, height=128, d_min=6, d_max=40)
gen_dataset(SceneConfig(**{**scene.__dict__, "seed": 11}), 32, root / "train")
gen_dataset(SceneConfig(**{**scene.__dict__, "seed": 12}), 1, root / "test")
train_set = load_dataset(root / "train" / "manifest.txt")
test = load_dataset(root / "test" / "manifest.txt")[0]

###############################################################################
# Burn-in with a 1 px deviation for four epochs, then hand over to the
# outlier-aware likelihood by epoch ten.

stochastic = StochasticConfig(e_t=4, e_f=10)
result = train(train_set, config=TrainConfig(epochs=24, steps_per_epoch=16), stochastic=stochastic)

###############################################################################
# Mean-mode prediction on the held-out pair, and a Monte-Carlo estimate
# of the epistemic spread.

inp = test.refiner_input()
out = forward(inp, result.params)
pred = test.d_raw.disparity + out.delta.data[0]
p_out = out.p_out.data[0]
valid = test.gt.valid & test.d_raw.valid
refined = metrics_report(pred, test.gt.disparity, valid, p_out)
raw = metrics_report(test.d_raw.disparity, test.gt.disparity, valid, p_out)


def fmt(v):
    return "n/a" if v is None else f"{v:.3f} px"


print(f"validated pixels: {refined.inlier_fraction:.1%}")
print(f"MAE validated: raw {fmt(raw.mae_validated)} -> refined {fmt(refined.mae_validated)}")
print(f"MAE all:       raw {fmt(raw.mae_all)} -> refined {fmt(refined.mae_all)}")
_, std, _ = mc_predict(inp, result.params, 8, seed=0)

fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
axes[0].imshow(np.where(valid, np.abs(pred - test.gt.disparity), np.nan), vmin=0, vmax=1, cmap="magma")
axes[0].set_title("refined |error| [px]")
axes[1].imshow(np.where(valid, p_out, np.nan), vmin=0, vmax=1, cmap="coolwarm")
axes[1].set_title("p_out")
axes[2].imshow(np.where(valid, std, np.nan), cmap="viridis")
axes[2].set_title("epistemic std [px]")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig("refinement.png", dpi=90)
