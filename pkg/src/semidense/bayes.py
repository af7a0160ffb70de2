"""Heteroscedastic inlier/outlier likelihood, priors and the adaptive schedule.

A pixel's disparity is modelled as Gaussian around ``d_raw + delta`` with a
standard deviation interpolated between the inlier and outlier levels by the
predicted outlier probability. The additive ``0.5 * ln(2 pi)`` constant is
dropped from every negative log-likelihood reported here.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

__all__ = [
    "StochasticConfig",
    "LossBreakdown",
    "ramp",
    "schedule_sigma",
    "sigma_endpoints",
    "sigma_of_pout",
    "nll_pixel",
    "crossover_residual",
    "inlier_reward",
    "nll_map",
    "total_loss",
    "marginal_predictive",
]


@dataclass
class StochasticConfig:
    sigma_in: float = 0.2
    sigma_out: float = 4.0
    sigma_prior: float = 1.0
    sigma0: float = 1.0
    e_t: int = 10
    e_f: int = 20
    reward_weight: float = 0.1
    kl_scale: float = 1.0
    reward_ramp: str = "up"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.sigma_in > 0:
            raise ConfigError(f"sigma_in must be positive, got {self.sigma_in}")
        if not self.sigma_in <= self.sigma_out:
            raise ConfigError(f"need sigma_in <= sigma_out, got {self.sigma_in} > {self.sigma_out}")
        if not (self.sigma0 > 0 and self.sigma_prior > 0):
            raise ConfigError("sigma0 and sigma_prior must be positive")
        if not 0 <= self.e_t <= self.e_f:
            raise ConfigError(f"need 0 <= e_t <= e_f, got e_t={self.e_t}, e_f={self.e_f}")
        if self.reward_ramp not in ("up", "down"):
            raise ConfigError(f"reward_ramp must be 'up' or 'down', got {self.reward_ramp!r}")
        if self.kl_scale < 0 or self.reward_weight < 0:
            raise ConfigError("kl_scale and reward_weight must be non-negative")

    @classmethod
    def baseline(cls, **overrides) -> "StochasticConfig":
        """One-pixel standard deviation everywhere; used with the outlier branch off."""
        base = dict(sigma_in=1.0, sigma_out=1.0, sigma0=1.0, reward_weight=0.0)
        base.update(overrides)
        return cls(**base)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict) -> "StochasticConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in values.items():
            if key not in kinds:
                continue
            kind = kinds[key]
            out[key] = raw if kind == "str" else (int(raw) if kind == "int" else float(raw))
        return cls(**out)


@dataclass
class LossBreakdown:
    nll: float
    kl: float
    l2_prior: float
    reward: float
    total: float
    mean_p_out: float
    kl_scale: float
    n_valid: int


def ramp(epoch: Optional[float], e_t: float, e_f: float) -> float:
    """0 up to ``e_t``, linear to 1 at ``e_f``, 1 afterwards. ``None`` means 1."""
    if epoch is None or epoch >= e_f:
        return 1.0
    if epoch <= e_t:
        return 0.0
    return (min(e_f, epoch) - e_t) / (e_f - e_t)


def schedule_sigma(epoch: Optional[float], sigma0: float, sigma_final: float, e_t: float, e_f: float) -> float:
    if e_t >= e_f:
        if epoch is None or epoch > e_t:
            return sigma_final
        return sigma0
    t = ramp(epoch, e_t, e_f)
    # lerp form keeps both plateaus exact
    return sigma0 * (1.0 - t) + sigma_final * t


def sigma_endpoints(cfg: StochasticConfig, epoch: Optional[float] = None) -> tuple[float, float]:
    """Scheduled (inlier, outlier) standard deviations at ``epoch``."""
    s_in = schedule_sigma(epoch, cfg.sigma0, cfg.sigma_in, cfg.e_t, cfg.e_f)
    s_out = schedule_sigma(epoch, cfg.sigma0, cfg.sigma_out, cfg.e_t, cfg.e_f)
    return s_in, s_out


def sigma_of_pout(p_out, cfg: StochasticConfig, epoch: Optional[float] = None):
    s_in, s_out = sigma_endpoints(cfg, epoch)
    return s_in + (s_out - s_in) * np.asarray(p_out, dtype=np.float64)[()]


def nll_pixel(d_gt, d_raw, delta, p_out, cfg: StochasticConfig, epoch: Optional[float] = None):
    sigma = sigma_of_pout(p_out, cfg, epoch)
    if np.any(sigma <= 0):
        raise ConfigError("standard deviation must be positive")
    r = np.asarray(d_gt, dtype=np.float64) - d_raw - delta
    return (np.log(sigma) + r * r / (2.0 * sigma * sigma))[()]


def crossover_residual(sigma_in: float, sigma_out: float) -> float:
    """Residual magnitude at which claiming inlier and outlier cost the same."""
    if not 0 < sigma_in < sigma_out:
        raise ConfigError("need 0 < sigma_in < sigma_out")
    a2, b2 = sigma_in * sigma_in, sigma_out * sigma_out
    return math.sqrt(2.0 * math.log(sigma_out / sigma_in) * a2 * b2 / (b2 - a2))


def inlier_reward(epoch: Optional[float], mean_p_out, cfg: StochasticConfig):
    t = ramp(epoch, cfg.e_t, cfg.e_f)
    if cfg.reward_ramp == "down":
        t = 1.0 - t
    return t * cfg.reward_weight * mean_p_out


def nll_map(
    d_gt: np.ndarray,
    d_raw: np.ndarray,
    delta: ad.Tensor,
    p_out: Optional[ad.Tensor],
    cfg: StochasticConfig,
    epoch: Optional[float],
) -> ad.Tensor:
    """Per-pixel negative log-likelihood as a differentiable (1, H, W) map.

    With ``p_out=None`` the inlier deviation is used everywhere.
    """
    s_in, s_out = sigma_endpoints(cfg, epoch)
    target = np.asarray(d_gt - d_raw, dtype=np.float64).reshape(delta.shape)
    r = ad.sub(target, delta)
    if p_out is None:
        return ad.add(math.log(s_in), ad.mul(ad.square(r), 1.0 / (2.0 * s_in * s_in)))
    sigma = ad.add(s_in, ad.mul(p_out, s_out - s_in))
    return ad.add(ad.log(sigma), ad.div(ad.square(r), ad.mul(ad.square(sigma), 2.0)))


def total_loss(
    deltas: Sequence[ad.Tensor],
    p_outs: Sequence[Optional[ad.Tensor]],
    d_gts: Sequence[np.ndarray],
    d_raws: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    variational: Sequence[ad.VariationalWeights],
    point: Sequence[ad.Tensor],
    cfg: StochasticConfig,
    epoch: Optional[float],
    n_pixels_per_epoch: float,
) -> tuple[Optional[ad.Tensor], LossBreakdown]:
    """Minibatch loss ``nll + kl_scale * (kl + l2_prior) + reward``.

    ``nll`` is the mean over all masked pixels of the batch. The prior is
    shared by every pixel of the epoch, so each batch carries its
    ``n_valid / n_pixels_per_epoch`` share of it; dividing by ``n_valid`` to
    match the mean gives ``kl_scale = cfg.kl_scale / n_pixels_per_epoch``.
    Returns ``(None,
    breakdown)`` when the batch has no valid pixel so the caller can skip it.
    """
    n_valid = int(sum(int(np.count_nonzero(m)) for m in masks))
    if n_valid == 0:
        nan = float("nan")
        return None, LossBreakdown(nan, nan, nan, nan, nan, nan, 0.0, 0)
    if n_pixels_per_epoch <= 0:
        raise ConfigError("n_pixels_per_epoch must be positive")

    nll_terms, pout_terms = [], []
    for delta, p_out, gt, raw, m in zip(deltas, p_outs, d_gts, d_raws, masks):
        m = np.asarray(m, dtype=np.float64).reshape(delta.shape)
        per_pixel = nll_map(gt, raw, delta, p_out, cfg, epoch)
        nll_terms.append(ad.sum_all(ad.mul(per_pixel, m)))
        if p_out is not None:
            pout_terms.append(ad.sum_all(ad.mul(p_out, m)))
    nll = ad.mul(_sum(nll_terms), 1.0 / n_valid)

    kl = _sum([ad.kl_gaussian(vw, cfg.sigma_prior) for vw in variational])
    l2 = ad.mul(_sum([ad.sum_all(ad.square(p)) for p in point]), 1.0 / (2.0 * cfg.sigma_prior**2))
    scale = cfg.kl_scale / n_pixels_per_epoch
    total = ad.add(nll, ad.mul(ad.add(kl, l2), scale))

    if pout_terms:
        mean_p = ad.mul(_sum(pout_terms), 1.0 / n_valid)
        reward = ad.mul(mean_p, inlier_reward(epoch, 1.0, cfg))
        total = ad.add(total, reward)
        mean_p_val, reward_val = mean_p.item(), reward.item()
    else:
        mean_p_val, reward_val = float("nan"), 0.0

    breakdown = LossBreakdown(
        nll=nll.item(),
        kl=kl.item(),
        l2_prior=l2.item(),
        reward=reward_val,
        total=total.item(),
        mean_p_out=mean_p_val,
        kl_scale=scale,
        n_valid=n_valid,
    )
    return total, breakdown


def _sum(terms: Sequence[ad.Tensor]) -> ad.Tensor:
    if not terms:
        return ad.Tensor(np.array(0.0))
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def marginal_predictive(p_out, cfg: StochasticConfig, epistemic_std=0.0, epoch: Optional[float] = None):
    """Predictive standard deviation: aleatoric level from ``p_out`` combined
    in quadrature with the Monte-Carlo epistemic spread."""
    aleatoric = sigma_of_pout(p_out, cfg, epoch)
    return np.hypot(aleatoric, epistemic_std)[()]
