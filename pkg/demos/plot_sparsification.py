"""
Sparsification curves
=====================

A confidence score is judged by how quickly the share of wrong pixels
drops as the least confident ones are removed. The oracle score (the error
itself) traces the optimal curve, a constant score stays flat at the
outlier rate, and a noisy score lands in between.
"""

import matplotlib

matplotlib.use("Agg")
import numpy as np

from semidense.evaluation import plot_curves, sparsification

rng = np.random.default_rng(0)
n = 50_000
gt = rng.uniform(5, 60, n)
wrong = rng.random(n) < 0.25
pred = gt + np.where(wrong, rng.uniform(0.3, 5.0, n), rng.normal(0, 0.08, n))
err = np.abs(pred - gt)

scores = {
    "oracle": err,
    "noisy": err + rng.exponential(0.5, n),
    "constant": np.zeros(n),
}
curves = {}
for name, score in scores.items():
    c = sparsification(pred, gt, score, t_e=0.2)
    curves[(name, 0.2)] = c
    print(f"{name:9s} auc={c.auc:.4f} aro={c.aro:.3f} rir={c.rir:+.3f} rto={c.rto:+.3f}")

print(f"outlier rate {curves[('oracle', 0.2)].rho_out:.3f}, optimal auc {curves[('oracle', 0.2)].auc_opt:.4f}")
plot_curves(curves, "sparsification.svg", title="synthetic scores")
