"""
Down-weighting outliers never hurts the inliers
================================================

Among a finite set of candidate predictions, the one minimising a loss in
which outlier points are scaled by alpha < 1 is at least as good on the
inliers as the minimiser of the plain loss. The check below runs with
exact rational arithmetic.
"""

from semidense.evaluation import theory_check, theory_sweep, worked_example

###############################################################################
# Two points with target 0. The second point is an outlier. Candidate
# (0, 1) fits the inlier perfectly, candidate (0.4, 0.4) splits the
# difference. The plain loss prefers the compromise, the weighted loss
# prefers the exact inlier fit.

inst = worked_example()
a, s, ok = theory_check(inst)
print(f"plain minimiser: candidate {a} {inst.candidates[a]}")
print(f"weighted minimiser: candidate {s} {inst.candidates[s]}")
print(f"weighted choice at least as good on the inliers: {ok}")

###############################################################################
# Random instances with many exact ties.

bad = theory_sweep(10_000, seed=1)
print(f"counterexamples among 10000 random instances: {len(bad)}")
