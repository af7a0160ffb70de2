"""
Full model against the baseline without outlier detection
=========================================================

Desk-scale version of the two-arm comparison: 64 training and 16 test
pairs at 256 x 256, both arms trained from the same seed for 40 epochs.
The baseline has no outlier branch and uses a 1 px deviation everywhere.
Both arms are scored on the pixels the full model validates
(p_out <= 0.05). Expect roughly ten minutes per arm on one core.

Pass a smaller epoch count as the first argument for a quick look.
"""

import logging
import sys
import tempfile
from pathlib import Path

from semidense.datagen import SceneConfig, gen_dataset
from semidense.evaluation import ablation_comparison, evaluate, plot_inlier_histogram
from semidense.trainer import TrainConfig, load_dataset, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 40
root = Path(tempfile.mkdtemp())

gen_dataset(SceneConfig(seed=100), 64, root / "train")
gen_dataset(SceneConfig(seed=200), 16, root / "test")
train_set = load_dataset(root / "train" / "manifest.txt", cache_dir=root / "cache")
test_set = load_dataset(root / "test" / "manifest.txt", cache_dir=root / "cache")

full = train(train_set, config=TrainConfig(epochs=epochs), out_dir=root / "full")
base = train(train_set, config=TrainConfig(epochs=epochs, ablation=True), out_dir=root / "baseline")

c = ablation_comparison(full.params, base.params, test_set)
print(f"validated pixels: {c.inlier_fraction:.1%}")
print(f"MAE on them: full {c.mae_full:.4f} px, baseline {c.mae_baseline:.4f} px, raw {c.mae_raw:.4f} px")
print(f"full / baseline = {c.ratio:.3f}")

ev = evaluate(full.params, test_set, n_mc=8)
for (score, t_e), curve in sorted(ev.curves.items()):
    print(f"{score:9s} t_e={t_e:g}: auc={curve.auc:.4f} rir={curve.rir:+.3f} rto={curve.rto:+.3f}")
plot_inlier_histogram(ev.inlier_fractions, "inliers.svg")
print(f"checkpoints and logs in {root}")
