"""Deterministic training loop for the refinement network.

Each step draws a batch of random patches, runs one stochastic forward per
patch on a shared tape, and applies an Adam update to every parameter. The
epoch index (1-based) drives the likelihood schedule and the inlier reward.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import bayes, matcher
from .bayes import StochasticConfig
from .datagen import load_sample, read_manifest
from .errors import ConfigError, DatasetError, NumericalError
from .imageio import DisparityMap, read_pfm, write_pfm
from .matcher import MatchConfig, TruncatedCostVolume
from .refiner import Architecture, RefinerConfig, RefinerInput, RefinerParams, forward, init_params, save_checkpoint

__all__ = [
    "TrainConfig",
    "PreparedSample",
    "Patch",
    "Adam",
    "prepare_sample",
    "load_dataset",
    "sample_patches",
    "train",
    "TrainResult",
    "LOG_COLUMNS",
    "checkpoint_metadata",
    "write_log",
]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "nll", "kl", "l2", "reward", "total", "mean_p_out")
MIN_VALID_FRACTION = 0.05
MAX_PATCH_RETRIES = 100


@dataclass
class TrainConfig:
    epochs: int = 40
    steps_per_epoch: int = 32
    batch_size: int = 8
    patch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    ablation: bool = False
    manifest: Optional[str] = None

    def validate(self, arch: Architecture) -> None:
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs, steps_per_epoch and batch_size must be >= 1")
        need = 4 * max(arch.pool_factors)
        if self.patch_size < need:
            raise ConfigError(f"patch size must be >= {need} (4x the largest pooling factor), got {self.patch_size}")
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be positive")

    def to_mapping(self) -> dict[str, str]:
        return {f"train.{k}": str(v) for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in values.items():
            name = key[6:] if key.startswith("train.") else key
            if name not in kinds:
                continue
            kind = kinds[name]
            if kind == "int":
                out[name] = int(raw)
            elif kind == "float":
                out[name] = float(raw)
            elif kind == "bool":
                out[name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes", "on")
            else:
                out[name] = raw
        return cls(**out)


@dataclass
class PreparedSample:
    """A stereo sample with its cached matcher outputs."""

    id: str
    gt: DisparityMap
    d_raw: DisparityMap
    volume: TruncatedCostVolume
    d_max: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt.disparity.shape

    @property
    def train_mask(self) -> np.ndarray:
        return self.gt.valid & self.d_raw.valid

    def refiner_input(self, rows: slice = slice(None), cols: slice = slice(None)) -> RefinerInput:
        d = DisparityMap(self.d_raw.disparity[rows, cols], self.d_raw.valid[rows, cols])
        vol = TruncatedCostVolume(self.volume.K, self.volume.slices[:, rows, cols], self.volume.chi[:, rows, cols])
        return RefinerInput(d, vol)


@dataclass
class Patch:
    sample: int
    row: int
    col: int
    inp: RefinerInput
    gt: np.ndarray
    d_raw: np.ndarray
    mask: np.ndarray


def _as_stored(vol: TruncatedCostVolume) -> TruncatedCostVolume:
    # the cache holds float32, so fresh volumes are rounded the same way
    return TruncatedCostVolume(vol.K, vol.slices.astype(np.float32).astype(np.float64), vol.chi.astype(np.float32).astype(np.float64))


def prepare_sample(left, right, gt: DisparityMap, K: int, match: MatchConfig, sample_id: str = "", cache_dir=None) -> PreparedSample:
    """Run the matcher (or read its cached outputs) for one sample."""
    raw_path = vol_path = None
    if cache_dir is not None:
        cache = Path(cache_dir)
        cache.mkdir(parents=True, exist_ok=True)
        raw_path, vol_path = cache / f"raw_{sample_id}.pfm", cache / f"vol_{sample_id}_K{K}.sdcv"
        if raw_path.exists() and vol_path.exists():
            vol = matcher.read_volume(vol_path)
            if vol.K == K:
                return PreparedSample(sample_id, gt, read_pfm(raw_path), vol, float(match.d_max))
    d_raw = matcher.match_hierarchical(left, right, match)
    vol = _as_stored(matcher.truncate_volume(left, right, d_raw, K, match.radius, match.d_max, match.eps))
    if raw_path is not None:
        write_pfm(d_raw, raw_path)
        matcher.write_volume(vol, vol_path)
    return PreparedSample(sample_id, gt, d_raw, vol, float(match.d_max))


def load_dataset(manifest, K: int = 3, match: Optional[MatchConfig] = None, cache_dir=None) -> list[PreparedSample]:
    """Load every manifest record, matching each pair once and caching the result."""
    manifest = Path(manifest)
    root = manifest.parent
    records = read_manifest(manifest)
    if not records:
        raise DatasetError(f"{manifest} lists no samples")
    out = []
    for rec in records:
        cfg = match or MatchConfig(d_max=int(math.ceil(rec.d_max)))
        pair = load_sample(rec, root)
        out.append(prepare_sample(pair.left, pair.right, pair.gt, K, cfg, rec.id, cache_dir))
    return out


def sample_patches(dataset: list[PreparedSample], patch_size: int, batch: int, rng: np.random.Generator) -> list[Patch]:
    """Uniform image and corner per patch; sparse patches are redrawn."""
    if not dataset:
        raise DatasetError("cannot sample patches from an empty dataset")
    patches = []
    for _ in range(batch):
        for _attempt in range(MAX_PATCH_RETRIES):
            i = int(rng.integers(len(dataset)))
            s = dataset[i]
            h, w = s.shape
            if h < patch_size or w < patch_size:
                raise DatasetError(f"sample {s.id} ({w}x{h}) is smaller than the {patch_size}px patch")
            r = int(rng.integers(h - patch_size + 1))
            c = int(rng.integers(w - patch_size + 1))
            rows, cols = slice(r, r + patch_size), slice(c, c + patch_size)
            mask = s.train_mask[rows, cols]
            if mask.mean() >= MIN_VALID_FRACTION:
                patches.append(Patch(i, r, c, s.refiner_input(rows, cols), s.gt.disparity[rows, cols], s.d_raw.disparity[rows, cols], mask))
                break
        else:
            raise DatasetError(f"no patch with >= {MIN_VALID_FRACTION:.0%} valid pixels after {MAX_PATCH_RETRIES} draws")
    return patches


class Adam:
    def __init__(self, params: list[ad.Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params, self.lr, self.beta1, self.beta2, self.eps = params, lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    params: RefinerParams
    best_params: RefinerParams
    history: list[dict]
    best_epoch: int


def _check_finite(b: bayes.LossBreakdown, epoch: int, step: int) -> None:
    for term in ("nll", "kl", "l2_prior", "reward", "total"):
        value = getattr(b, term)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite {term}={value} at epoch {epoch}, batch {step}")


def train(
    dataset: list[PreparedSample],
    arch: Optional[Architecture] = None,
    config: Optional[TrainConfig] = None,
    stochastic: Optional[StochasticConfig] = None,
    refiner_config: Optional[RefinerConfig] = None,
    out_dir=None,
    metadata: Optional[dict] = None,
) -> TrainResult:
    """Train from scratch; writes ``final.ckpt``, ``best.ckpt`` and ``log.csv``
    into ``out_dir`` when given.

    In ablation mode the outlier branch is not evaluated and, unless a
    configuration is passed explicitly, the likelihood uses a 1 px deviation
    for every pixel.
    """
    arch = arch or Architecture()
    config = config or TrainConfig()
    config.validate(arch)
    if stochastic is None:
        stochastic = StochasticConfig.baseline() if config.ablation else StochasticConfig()
    if dataset and refiner_config is None:
        refiner_config = RefinerConfig(d_max=dataset[0].d_max)
    params = init_params(arch, refiner_config, seed=config.seed)
    use_outliers = not config.ablation
    # the ablation arm has no outlier branch: no loss, prior or update reaches it
    active = [n for n in params.tensors if use_outliers or not n.startswith("out.")]
    trainable = [params[n] for n in active]
    opt = Adam(trainable, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    patch_rng = np.random.default_rng([config.seed, 1])
    noise_rng = np.random.default_rng([config.seed, 2])
    n_epoch_pixels = float(sum(int(s.train_mask.sum()) for s in dataset))
    if n_epoch_pixels == 0:
        raise DatasetError("dataset has no pixel that is both ground-truth and match valid")
    layers = [n for n in params.variational_layers() if use_outliers or not n.startswith("out.")]
    variational = [vw for n in layers for vw in params.variational(n)]
    point = [params[n] for n in active if n.endswith(".w")]

    history: list[dict] = []
    best_total, best_epoch, best_params = math.inf, 0, params.copy()
    for epoch in range(1, config.epochs + 1):
        sums = dict.fromkeys(("nll", "kl", "l2", "reward", "total", "mean_p_out"), 0.0)
        n_steps = 0
        for step in range(config.steps_per_epoch):
            patches = sample_patches(dataset, config.patch_size, config.batch_size, patch_rng)
            with ad.Tape() as tape:
                outs = [forward(p.inp, params, noise_rng, "train", outlier_branch=use_outliers) for p in patches]
                total, b = bayes.total_loss(
                    [o.delta for o in outs], [o.p_out for o in outs],
                    [p.gt for p in patches], [p.d_raw for p in patches], [p.mask for p in patches],
                    variational, point, stochastic, epoch, n_epoch_pixels,
                )
            if total is None:
                continue
            _check_finite(b, epoch, step)
            grads = ad.backward(tape, total, trainable)
            opt.step(grads)
            n_steps += 1
            sums["nll"] += b.nll
            sums["kl"] += b.kl
            sums["l2"] += b.l2_prior
            sums["reward"] += b.reward
            sums["total"] += b.total
            sums["mean_p_out"] += b.mean_p_out if use_outliers else 0.0
        row = {"epoch": epoch}
        for k, v in sums.items():
            row[k] = v / max(n_steps, 1)
        if not use_outliers:
            row["mean_p_out"] = None
        history.append(row)
        log.info("epoch %d: nll=%.4f total=%.4f mean_p_out=%s", epoch, row["nll"], row["total"], row["mean_p_out"])
        if row["total"] < best_total:
            best_total, best_epoch, best_params = row["total"], epoch, params.copy()

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = checkpoint_metadata(config, stochastic, metadata)
        save_checkpoint(params, out / "final.ckpt", meta)
        save_checkpoint(best_params, out / "best.ckpt", {**meta, "best_epoch": best_epoch})
        write_log(history, out / "log.csv")
    return TrainResult(params, best_params, history, best_epoch)


def checkpoint_metadata(config: TrainConfig, stochastic: StochasticConfig, extra: Optional[dict]) -> dict:
    meta = {f"stochastic.{k}": v for k, v in asdict(stochastic).items()}
    meta.update(config.to_mapping())
    meta.update(extra or {})
    return meta


def write_log(history: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in history:
            writer.writerow(["" if row[c] is None else (row[c] if c == "epoch" else repr(float(row[c]))) for c in LOG_COLUMNS])
