"""Validated-pixel accuracy, sparsification curves and the weighting guarantee.

A pixel is *validated* when its outlier probability is at most the threshold
(0.05 by default). Sparsification keeps the lowest-score fraction of pixels
and reports which share of them are wrong by more than ``t_e``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .bayes import StochasticConfig, sigma_of_pout
from .errors import ConfigError
from .imageio import quantize

log = logging.getLogger(__name__)

__all__ = [
    "MetricsReport",
    "SparsificationCurve",
    "TheoryInstance",
    "validated_mask",
    "mae",
    "metrics_report",
    "density_grid",
    "f_pi_opt",
    "sparsification",
    "theory_check",
    "random_theory_instance",
    "theory_sweep",
    "worked_example",
    "ImageEvaluation",
    "Evaluation",
    "evaluate",
    "AblationComparison",
    "ablation_comparison",
    "write_report_csv",
    "write_curve_csv",
]

DEFAULT_THRESHOLD = 0.05
SCORES = ("p_out", "epistemic", "total")


@dataclass
class MetricsReport:
    mae_validated: Optional[float]
    mae_all: Optional[float]
    inlier_fraction: float
    n_validated: int
    n_total: int


@dataclass
class SparsificationCurve:
    densities: np.ndarray
    f_pi: np.ndarray
    auc: float
    auc_opt: float
    auc_rand: float
    aro: Optional[float]
    rir: Optional[float]
    rto: Optional[float]
    t_e: float
    rho_out: float


def validated_mask(p_out, threshold: float = DEFAULT_THRESHOLD, valid=None, quantized_bits: Optional[int] = None) -> np.ndarray:
    """``p_out <= threshold`` restricted to ``valid``.

    With ``quantized_bits`` the comparison is made between integer codes,
    which is how p_out maps read back from PNG files should be judged: the
    code nearest the threshold then counts as validated.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must be in (0, 1), got {threshold}")
    p = np.asarray(p_out, dtype=np.float64)
    if quantized_bits is None:
        mask = p <= threshold
    else:
        mask = quantize(p, quantized_bits) <= quantize(np.array(threshold), quantized_bits)
    if valid is not None:
        mask = mask & np.asarray(valid, dtype=bool)
    return mask


def mae(pred, gt, mask) -> Optional[float]:
    """Mean absolute error over ``mask``; ``None`` when the mask is empty."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return None
    return float(np.abs(np.asarray(pred, dtype=np.float64)[mask] - np.asarray(gt, dtype=np.float64)[mask]).sum() / n)


def metrics_report(pred, gt, valid, p_out=None, threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    valid = np.asarray(valid, dtype=bool)
    sel = valid if p_out is None else validated_mask(p_out, threshold, valid)
    n_total = int(valid.sum())
    return MetricsReport(
        mae_validated=mae(pred, gt, sel),
        mae_all=mae(pred, gt, valid),
        inlier_fraction=(int(sel.sum()) / n_total) if n_total else 0.0,
        n_validated=int(sel.sum()),
        n_total=n_total,
    )


# sparsification ----------------------------------------------------------------


def density_grid(n: int = 100) -> np.ndarray:
    """``n`` uniform densities in (0, 1]."""
    if n < 1:
        raise ConfigError("grid needs at least one point")
    return np.arange(1, n + 1) / n


def f_pi_opt(rho_d, rho_out: float):
    """Outlier share among the kept pixels for a classifier that ranks every
    inlier ahead of every outlier."""
    rho_d = np.asarray(rho_d, dtype=np.float64)
    cut = 1.0 - rho_out
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(rho_d >= cut, (rho_d - cut) / np.where(rho_d > 0, rho_d, 1.0), 0.0)
    return val[()]


def _area(densities: np.ndarray, values: np.ndarray) -> float:
    # hold the first value down to density 0, then trapezoids
    x = np.concatenate([[0.0], densities])
    y = np.concatenate([[values[0]], values])
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def sparsification(pred, gt, score, t_e: float = 0.2, grid: Optional[np.ndarray] = None, mask=None) -> SparsificationCurve:
    """Sparsification curve with ties in ``score`` broken by pixel order."""
    if t_e <= 0:
        raise ConfigError("error threshold t_e must be positive")
    pred, gt, score = (np.asarray(a, dtype=np.float64).ravel() for a in (pred, gt, score))
    if mask is not None:
        m = np.asarray(mask, dtype=bool).ravel()
        pred, gt, score = pred[m], gt[m], score[m]
    n = pred.size
    if n == 0:
        raise ConfigError("sparsification needs at least one pixel")
    if not np.all(np.isfinite(score)):
        raise ConfigError("scores must be finite")
    grid = density_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    wrong = np.abs(pred - gt) > t_e
    order = np.argsort(score, kind="stable")
    wrong_cum = np.cumsum(wrong[order])
    keep = np.clip(np.rint(grid * n).astype(np.int64), 1, n)
    f = wrong_cum[keep - 1] / keep

    rho_out = float(wrong.mean())
    auc = _area(grid, f)
    auc_opt = _area(grid, np.asarray(f_pi_opt(grid, rho_out), dtype=np.float64).reshape(grid.shape))
    auc_rand = rho_out
    aro = auc_opt / auc if auc > 0 else None
    rir = (auc_rand - auc) / auc_rand if auc_rand > 0 else None
    rto = (auc_rand - auc) / (auc_rand - auc_opt) if auc_rand - auc_opt > 0 else None
    return SparsificationCurve(grid, f, auc, auc_opt, auc_rand, aro, rir, rto, t_e, rho_out)


# weighting guarantee -----------------------------------------------------------


@dataclass
class TheoryInstance:
    """Targets, candidate predictions, outlier flags and the outlier weight."""

    targets: Sequence
    candidates: Sequence[Sequence]
    outlier: Sequence[int]
    alpha: object

    def __post_init__(self):
        n = len(self.targets)
        if len(self.candidates) < 2:
            raise ConfigError("need at least two candidates")
        if any(len(c) != n for c in self.candidates) or len(self.outlier) != n:
            raise ConfigError("candidate and flag lengths must match the targets")
        if not any(flag == 0 for flag in self.outlier):
            raise ConfigError("need at least one inlier")
        if not 0 < Fraction(self.alpha) < 1:
            raise ConfigError("alpha must lie in (0, 1)")


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


def theory_check(instance: TheoryInstance) -> tuple[int, int, bool]:
    """Exact check that down-weighting outliers never hurts the inliers.

    Returns ``(a, s, verdict)``: the index of the candidate minimising the
    plain squared error, the index minimising the weighted error (outliers
    scaled by ``alpha``), and whether ``s`` is at least as good as ``a`` on
    the inliers. Ties go to the lower index. Rational arithmetic keeps every
    comparison exact.
    """
    f = [_frac(v) for v in instance.targets]
    alpha = _frac(instance.alpha)
    weights = [1 + (alpha - 1) * flag for flag in instance.outlier]
    plain, weighted, inlier = [], [], []
    for cand in instance.candidates:
        d = [(_frac(c) - t) ** 2 for c, t in zip(cand, f)]
        plain.append(sum(d))
        weighted.append(sum(w * v for w, v in zip(weights, d)))
        inlier.append(sum(v for v, flag in zip(d, instance.outlier) if flag == 0))
    a = min(range(len(plain)), key=lambda i: (plain[i], i))
    s = min(range(len(weighted)), key=lambda i: (weighted[i], i))
    return a, s, inlier[s] <= inlier[a]


def worked_example() -> TheoryInstance:
    return TheoryInstance(
        targets=[0, 0],
        candidates=[[0, 1], [Fraction(2, 5), Fraction(2, 5)]],
        outlier=[0, 1],
        alpha=Fraction(1, 10),
    )


def random_theory_instance(rng: np.random.Generator) -> TheoryInstance:
    """Up to 6 points, up to 8 candidates, alpha on the 0.01 grid."""
    n = int(rng.integers(1, 7))
    k = int(rng.integers(2, 9))
    outlier = [int(v) for v in rng.integers(0, 2, n)]
    outlier[int(rng.integers(n))] = 0
    # small integer grids make exact ties common
    targets = [Fraction(int(v), 4) for v in rng.integers(-8, 9, n)]
    candidates = [[Fraction(int(v), 4) for v in rng.integers(-8, 9, n)] for _ in range(k)]
    alpha = Fraction(int(rng.integers(1, 100)), 100)
    return TheoryInstance(targets, candidates, outlier, alpha)


def theory_sweep(n_instances: int = 10_000, seed: int = 0) -> list[TheoryInstance]:
    """Counterexamples among ``n_instances`` random instances (expected: none)."""
    rng = np.random.default_rng(seed)
    bad = []
    for _ in range(n_instances):
        inst = random_theory_instance(rng)
        if not theory_check(inst)[2]:
            bad.append(inst)
    return bad


# end-to-end evaluation ---------------------------------------------------------


@dataclass
class ImageEvaluation:
    id: str
    report: MetricsReport
    raw_mae_validated: Optional[float]
    curves: dict[tuple[str, float], SparsificationCurve] = field(default_factory=dict)


@dataclass
class Evaluation:
    images: list[ImageEvaluation]
    aggregate: MetricsReport
    raw_mae_validated: Optional[float]
    curves: dict[tuple[str, float], SparsificationCurve]
    inlier_fractions: list[float]


def evaluate(
    params,
    dataset,
    threshold: float = DEFAULT_THRESHOLD,
    t_es: Sequence[float] = (0.2, 1.0),
    n_mc: int = 8,
    seed: int = 0,
    stochastic: Optional[StochasticConfig] = None,
    outlier_branch: bool = True,
) -> Evaluation:
    """Mean-mode inference on every sample, with Monte-Carlo spread when
    ``n_mc >= 2``; curves are computed per image and on the pooled pixels.

    Scores: ``p_out``, the epistemic std, and ``total`` = aleatoric std
    (from ``p_out``) plus epistemic std.
    """
    from .refiner import forward, mc_predict

    stochastic = stochastic or StochasticConfig()
    images: list[ImageEvaluation] = []
    pooled: dict[str, list[np.ndarray]] = {k: [] for k in ("pred", "gt", "raw", "sel", "valid", *SCORES)}
    for i, s in enumerate(dataset):
        if s.gt is None or not s.gt.valid.any():
            log.warning("sample %s has no ground truth; skipped", s.id)
            continue
        inp = s.refiner_input()
        out = forward(inp, params, None, "mean", outlier_branch=outlier_branch)
        pred = s.d_raw.disparity + out.delta.data[0]
        valid = s.gt.valid & s.d_raw.valid
        p_out = out.p_out.data[0] if out.p_out is not None else None
        report = metrics_report(pred, s.gt.disparity, valid, p_out, threshold)
        sel = valid if p_out is None else validated_mask(p_out, threshold, valid)
        scores = {}
        if p_out is not None:
            scores["p_out"] = p_out
        if n_mc >= 2:
            _, epi, _ = mc_predict(inp, params, n_mc, seed=seed + i, outlier_branch=outlier_branch)
            scores["epistemic"] = epi
            aleatoric = sigma_of_pout(p_out if p_out is not None else 0.0, stochastic)
            scores["total"] = aleatoric + epi
        curves = {}
        if valid.any():
            for name, sc in scores.items():
                for t_e in t_es:
                    curves[(name, t_e)] = sparsification(pred, s.gt.disparity, sc, t_e, mask=valid)
        images.append(ImageEvaluation(s.id, report, mae(s.d_raw.disparity, s.gt.disparity, sel), curves))
        pooled["pred"].append(pred[valid])
        pooled["gt"].append(s.gt.disparity[valid])
        pooled["raw"].append(s.d_raw.disparity[valid])
        pooled["sel"].append(sel[valid])
        for name, sc in scores.items():
            pooled[name].append(np.broadcast_to(sc, valid.shape)[valid])

    if not images:
        raise ConfigError("no sample with ground truth to evaluate")
    pred, gt, raw, sel = (np.concatenate(pooled[k]) for k in ("pred", "gt", "raw", "sel"))
    n_total = int(sel.size)
    aggregate = MetricsReport(
        mae_validated=mae(pred, gt, sel),
        mae_all=mae(pred, gt, np.ones_like(sel)),
        inlier_fraction=int(sel.sum()) / n_total if n_total else 0.0,
        n_validated=int(sel.sum()),
        n_total=n_total,
    )
    curves = {}
    for name in SCORES:
        if pooled[name]:
            sc = np.concatenate(pooled[name])
            for t_e in t_es:
                curves[(name, t_e)] = sparsification(pred, gt, sc, t_e)
    return Evaluation(images, aggregate, mae(raw, gt, sel), curves, [im.report.inlier_fraction for im in images])


@dataclass
class AblationComparison:
    """Both arms scored on the pixels the full model validates."""

    mae_full: Optional[float]
    mae_baseline: Optional[float]
    mae_raw: Optional[float]
    inlier_fraction: float
    n_validated: int
    n_total: int

    @property
    def ratio(self) -> Optional[float]:
        if self.mae_full is None or not self.mae_baseline:
            return None
        return self.mae_full / self.mae_baseline


def ablation_comparison(full, baseline, dataset, threshold: float = DEFAULT_THRESHOLD) -> AblationComparison:
    """Mean-mode predictions of a full model and of a model trained without
    the outlier branch, pooled over every ground-truth pixel of ``dataset``."""
    from .refiner import forward

    err = {"full": [], "baseline": [], "raw": []}
    n_total = 0
    for s in dataset:
        valid = s.gt.valid & s.d_raw.valid
        if not valid.any():
            continue
        inp = s.refiner_input()
        out_f = forward(inp, full, None, "mean")
        out_b = forward(inp, baseline, None, "mean", outlier_branch=False)
        sel = validated_mask(out_f.p_out.data[0], threshold, valid)
        gt, raw = s.gt.disparity[sel], s.d_raw.disparity[sel]
        err["full"].append(np.abs(raw + out_f.delta.data[0][sel] - gt))
        err["baseline"].append(np.abs(raw + out_b.delta.data[0][sel] - gt))
        err["raw"].append(np.abs(raw - gt))
        n_total += int(valid.sum())
    if n_total == 0:
        raise ConfigError("no sample with ground truth to compare on")
    pooled = {k: np.concatenate(v) for k, v in err.items()}
    n_sel = int(pooled["full"].size)

    def mean(v):
        return float(v.sum() / v.size) if v.size else None

    return AblationComparison(mean(pooled["full"]), mean(pooled["baseline"]), mean(pooled["raw"]), n_sel / n_total, n_sel, n_total)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


def write_report_csv(ev: Evaluation, path) -> None:
    """One row per image plus an ``aggregate`` row."""
    cols = ["id", "mae_validated", "mae_all", "raw_mae_validated", "inlier_fraction", "n_validated", "n_total"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        rows = [(im.id, im.report, im.raw_mae_validated) for im in ev.images]
        rows.append(("aggregate", ev.aggregate, ev.raw_mae_validated))
        for name, r, raw in rows:
            w.writerow([name, _fmt(r.mae_validated), _fmt(r.mae_all), _fmt(raw), _fmt(r.inlier_fraction), r.n_validated, r.n_total])


def write_curve_csv(curve: SparsificationCurve, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["rho_d", "f_pi"])
        for rho, val in zip(curve.densities, curve.f_pi):
            w.writerow([repr(float(rho)), repr(float(val))])


def curve_summary_rows(curves: dict) -> list[list[str]]:
    rows = [["score", "t_e", "auc", "auc_opt", "auc_rand", "aro", "rir", "rto", "rho_out"]]
    for (name, t_e), c in sorted(curves.items()):
        rows.append([name, _fmt(t_e), _fmt(c.auc), _fmt(c.auc_opt), _fmt(c.auc_rand), _fmt(c.aro), _fmt(c.rir), _fmt(c.rto), _fmt(c.rho_out)])
    return rows


def plot_curves(curves: dict, path, title: str = "") -> None:
    """SVG of f_pi against density, with the optimal and random references."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "semidense"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for (name, t_e), c in sorted(curves.items()):
        ax.plot(c.densities, c.f_pi, label=f"{name} (t_e={t_e:g})")
    if curves:
        c = next(iter(curves.values()))
        ax.plot(c.densities, f_pi_opt(c.densities, c.rho_out), "k--", label="optimal")
        ax.axhline(c.rho_out, color="grey", linestyle=":", label="random")
    ax.set_xlabel("density")
    ax.set_ylabel("outliers among kept pixels")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_inlier_histogram(fractions: Sequence[float], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "semidense"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(fractions, bins=np.linspace(0, 1, 21))
    ax.set_xlabel("inlier fraction per image")
    ax.set_ylabel("images")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
