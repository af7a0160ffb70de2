"""Semi-dense active-stereo disparity refinement with a small Bayesian CNN."""

__version__ = "0.1.0"
