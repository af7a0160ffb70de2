"""Bayesian refinement network over a raw disparity and its cost volume.

The network maps ``x = (d_raw / d_max, V, chi)`` to a disparity correction
``delta`` and an outlier probability ``p_out``. It has three parts:

* context aggregation: min/max/avg pooling pyramids, one conv per level,
  nearest upsampling, concatenated with a full-resolution 1x1 bypass;
* regression: 1x1 convs, the last two of them variational;
* outlier detection: 1x1 convs feeding a separable 5x5 filter
  (25 -> 1 aggregation, then 1x5, then 5x1) and a sigmoid.

Modes: ``"train"`` and ``"sample"`` enable dropout and draw variational
weights; ``"mean"`` disables dropout and uses the weight means.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ChecksumError, ConfigError, FormatError
from .imageio import DisparityMap
from .matcher import TruncatedCostVolume

__all__ = [
    "Architecture",
    "RefinerConfig",
    "RefinerInput",
    "RefinerParams",
    "RefinementOutput",
    "init_params",
    "identity_params",
    "context_aggregate",
    "regress_delta",
    "detect_outliers",
    "separable_filter",
    "forward",
    "predict_disparity",
    "mc_predict",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_metadata",
]

CHECKPOINT_MAGIC = b"SDBN0001"
CHECKPOINT_VERSION = 1
MODES = ("train", "mean", "sample")


@dataclass(frozen=True)
class Architecture:
    """Channel widths and kernel sizes; serialised as u32 fields."""

    K: int = 3
    ctx_full: int = 16
    ctx_level: int = 16
    pool_factors: tuple[int, ...] = (2, 4, 8)
    ctx_kernel: int = 3
    regression: tuple[int, ...] = (32, 32, 24, 16)
    outlier_hidden: int = 25
    sep_taps: int = 5

    def __post_init__(self):
        object.__setattr__(self, "pool_factors", tuple(int(f) for f in self.pool_factors))
        object.__setattr__(self, "regression", tuple(int(c) for c in self.regression))
        if self.K < 0:
            raise ConfigError(f"K must be non-negative, got {self.K}")
        if len(self.regression) < 3:
            raise ConfigError("regression needs at least three hidden widths")
        if self.ctx_kernel % 2 == 0 or self.sep_taps % 2 == 0:
            raise ConfigError("kernel sizes must be odd")
        if any(f < 2 for f in self.pool_factors):
            raise ConfigError("pool factors must be >= 2")
        if min(self.ctx_full, self.ctx_level, self.outlier_hidden, *self.regression) < 1:
            raise ConfigError("all widths must be positive")

    @property
    def in_channels(self) -> int:
        return 2 * (2 * self.K + 1) + 1

    @property
    def context_channels(self) -> int:
        return self.ctx_full + self.ctx_level * len(self.pool_factors)

    def to_fields(self) -> list[int]:
        return [
            self.K, self.ctx_full, self.ctx_level, len(self.pool_factors), *self.pool_factors,
            self.ctx_kernel, len(self.regression), *self.regression, self.outlier_hidden, self.sep_taps,
        ]

    @classmethod
    def from_fields(cls, values) -> "Architecture":
        v = list(values)
        try:
            K, full, level, n_levels = v[:4]
            factors = tuple(v[4:4 + n_levels])
            pos = 4 + n_levels
            kernel, n_reg = v[pos:pos + 2]
            reg = tuple(v[pos + 2:pos + 2 + n_reg])
            hidden, taps = v[pos + 2 + n_reg:pos + 4 + n_reg]
            if pos + 4 + n_reg != len(v) or len(factors) != n_levels or len(reg) != n_reg:
                raise ValueError
        except ValueError:
            raise FormatError(f"malformed architecture descriptor {v}") from None
        return cls(K, full, level, factors, kernel, reg, hidden, taps)


@dataclass
class RefinerConfig:
    dropout: float = 0.2
    lambda_act: float = 0.01
    slope_context: float = 0.3
    slope_regression: float = 0.3
    slope_outlier: float = 0.1
    d_max: float = 72.0
    rho_init: float = -6.0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.d_max <= 0:
            raise ConfigError("d_max must be positive")

    def to_mapping(self) -> dict[str, str]:
        return {f"refiner.{k}": repr(v) for k, v in asdict(self).items()}

    @classmethod
    def from_mapping(cls, values: dict) -> "RefinerConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k[8:]: float(v) for k, v in values.items() if k.startswith("refiner.") and k[8:] in names})


@dataclass
class RefinerInput:
    d_raw: DisparityMap
    volume: TruncatedCostVolume

    def __post_init__(self):
        if self.volume.shape != self.d_raw.disparity.shape:
            raise ConfigError(f"volume shape {self.volume.shape} != disparity shape {self.d_raw.disparity.shape}")

    def stacked(self, d_max: float) -> np.ndarray:
        """``(2(2K+1)+1, H, W)`` array: normalised disparity, slices, support."""
        d = np.where(self.d_raw.valid, self.d_raw.disparity, 0.0)[None] / d_max
        return np.concatenate([d, self.volume.slices, self.volume.chi], axis=0)


@dataclass
class RefinementOutput:
    delta: ad.Tensor  # (1, H, W)
    p_out: Optional[ad.Tensor]  # (1, H, W), None when the outlier branch is off


@dataclass
class RefinerParams:
    arch: Architecture
    config: RefinerConfig
    tensors: dict[str, ad.Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def variational(self, name: str) -> tuple[ad.VariationalWeights, ad.VariationalWeights]:
        t = self.tensors
        return (
            ad.VariationalWeights(t[f"{name}.w_mu"], t[f"{name}.w_rho"]),
            ad.VariationalWeights(t[f"{name}.b_mu"], t[f"{name}.b_rho"]),
        )

    def variational_layers(self) -> list[str]:
        return sorted({n.rsplit(".", 1)[0] for n in self.tensors if n.endswith(".w_mu")})

    def variational_weights(self) -> list[ad.VariationalWeights]:
        out = []
        for name in self.variational_layers():
            out.extend(self.variational(name))
        return out

    def point_tensors(self, weights_only: bool = False) -> list[ad.Tensor]:
        """Non-variational tensors; ``weights_only`` drops the biases."""
        out = []
        for n, t in self.tensors.items():
            if n.endswith(("_mu", "_rho")):
                continue
            if weights_only and n.endswith(".b"):
                continue
            out.append(t)
        return out

    def trainable(self) -> list[ad.Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def count_variational(self) -> int:
        return int(sum(t.data.size for n, t in self.tensors.items() if n.endswith(("_mu", "_rho"))))

    def separable_weight_count(self) -> int:
        """Weights (means, no biases) of the separable outlier filter."""
        return int(self["out.agg.w_mu"].data.size + self["out.row.w"].data.size + self["out.col.w"].data.size)

    def copy(self) -> "RefinerParams":
        tensors = {n: ad.Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()}
        return RefinerParams(self.arch, RefinerConfig(**asdict(self.config)), tensors)


def init_params(arch: Architecture | None = None, config: RefinerConfig | None = None, seed: int = 0) -> RefinerParams:
    """He-initialised point layers, small-mean variational layers."""
    arch = arch or Architecture()
    config = config or RefinerConfig()
    rng = np.random.default_rng([int(seed), 0x5EED])
    tensors: dict[str, np.ndarray] = {}

    def point(name, o, c, kh=1, kw=1, slope=0.0, scale=1.0):
        fan_in = c * kh * kw
        std = scale * np.sqrt(2.0 / ((1.0 + slope * slope) * fan_in))
        tensors[f"{name}.w"] = rng.normal(0.0, std, (o, c, kh, kw))
        tensors[f"{name}.b"] = np.zeros(o)

    def variational(name, o, c, std):
        tensors[f"{name}.w_mu"] = rng.normal(0.0, std, (o, c, 1, 1))
        tensors[f"{name}.w_rho"] = np.full((o, c, 1, 1), config.rho_init)
        tensors[f"{name}.b_mu"] = np.zeros(o)
        tensors[f"{name}.b_rho"] = np.full(o, config.rho_init)

    c_in = arch.in_channels
    point("ctx.full", arch.ctx_full, c_in, slope=config.slope_context)
    k = arch.ctx_kernel
    for i, _ in enumerate(arch.pool_factors):
        point(f"ctx.level{i}", arch.ctx_level, 3 * c_in, k, k, slope=config.slope_context)

    reg = arch.regression
    point("reg.0", reg[0], arch.context_channels, slope=config.slope_regression)
    point("reg.1", reg[1], reg[0], slope=config.slope_regression)
    for i in range(2, len(reg) - 1):
        point(f"reg.{i}", reg[i], reg[i - 1])
    last = len(reg) - 1
    variational(f"reg.{last}", reg[last], reg[last - 1], np.sqrt(2.0 / reg[last - 1]))
    # start with near-zero corrections
    variational("reg.final", 1, reg[last], 0.1 / np.sqrt(reg[last]))

    point("out.hidden", arch.outlier_hidden, reg[1], slope=config.slope_outlier)
    variational("out.agg", 1, arch.outlier_hidden, 1.0 / np.sqrt(arch.outlier_hidden))
    taps = arch.sep_taps
    tensors["out.row.w"] = rng.normal(0.0, 1.0 / np.sqrt(taps), (1, 1, 1, taps))
    tensors["out.row.b"] = np.zeros(1)
    tensors["out.col.w"] = rng.normal(0.0, 1.0 / np.sqrt(taps), (1, 1, taps, 1))
    tensors["out.col.b"] = np.zeros(1)

    return RefinerParams(
        arch, config, {n: ad.Tensor(v, requires_grad=True, name=n) for n, v in tensors.items()}
    )


def identity_params(arch: Architecture | None = None, config: RefinerConfig | None = None) -> RefinerParams:
    """A network that leaves the raw disparity untouched and validates every
    pixel: zero correction and a p_out far below any threshold."""
    params = init_params(arch, config, seed=0)
    for name in ("reg.final.w_mu", "reg.final.b_mu", "out.col.w"):
        params[name].data[:] = 0.0
    for name in ("reg.final.w_rho", "reg.final.b_rho"):
        params[name].data[:] = -40.0
    params["out.col.b"].data[:] = -60.0
    return params


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")


def _dropout(x, params: RefinerParams, rng, mode):
    return ad.dropout(x, params.config.dropout, rng, "mean" if mode == "mean" else "train")


def _var_conv(x, params: RefinerParams, name: str, rng, mode):
    w, b = params.variational(name)
    return ad.variational_conv1x1(x, w, b, rng, "mean" if mode == "mean" else "sample")


def context_aggregate(x, params: RefinerParams) -> ad.Tensor:
    """Full-resolution bypass concatenated with one feature map per pooling level."""
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=np.float64))
    arch, cfg = params.arch, params.config
    if x.shape[0] != arch.in_channels:
        raise ConfigError(f"expected {arch.in_channels} input channels, got {x.shape[0]}")
    _, h, w = x.shape
    slope = cfg.slope_context
    outs = [ad.leaky_relu(ad.conv2d(x, params["ctx.full.w"], params["ctx.full.b"]), slope)]
    for i, f in enumerate(arch.pool_factors):
        pooled = ad.concat([ad.pool(x, "min", f), ad.pool(x, "max", f), ad.pool(x, "avg", f)])
        # border replication keeps the response to a constant input constant
        pooled = ad.pad_edge(pooled, arch.ctx_kernel // 2, arch.ctx_kernel // 2)
        y = ad.conv2d(pooled, params[f"ctx.level{i}.w"], params[f"ctx.level{i}.b"], padding="valid")
        y = ad.leaky_relu(y, slope)
        outs.append(ad.upsample_nearest(y, f, h, w))
    return ad.concat(outs)


def regress_delta(features: ad.Tensor, params: RefinerParams, rng, mode: str = "mean", *, return_hidden: bool = False):
    """Returns ``(delta, shared_features)``; with ``return_hidden`` also the
    input of the final variational layer."""
    _check_mode(mode)
    slope = params.config.slope_regression
    h = _dropout(features, params, rng, mode)
    h = _dropout(ad.leaky_relu(ad.conv2d(h, params["reg.0.w"], params["reg.0.b"]), slope), params, rng, mode)
    shared = _dropout(ad.leaky_relu(ad.conv2d(h, params["reg.1.w"], params["reg.1.b"]), slope), params, rng, mode)
    h = shared
    n = len(params.arch.regression)
    lam = params.config.lambda_act
    for i in range(2, n - 1):
        h = ad.leaky_hardswish(ad.conv2d(h, params[f"reg.{i}.w"], params[f"reg.{i}.b"]), lam)
    h = ad.leaky_hardswish(_var_conv(h, params, f"reg.{n - 1}", rng, mode), lam)
    delta = _var_conv(h, params, "reg.final", rng, mode)
    if return_hidden:
        return delta, shared, h
    return delta, shared


def separable_filter(hidden: ad.Tensor, params: RefinerParams, rng, mode: str = "mean") -> ad.Tensor:
    """Channel aggregation, then 1xT and Tx1 convolutions: pre-sigmoid logits."""
    y = _var_conv(hidden, params, "out.agg", rng, mode)
    y = ad.conv2d(y, params["out.row.w"], params["out.row.b"])
    return ad.conv2d(y, params["out.col.w"], params["out.col.b"])


def detect_outliers(shared: ad.Tensor, params: RefinerParams, rng, mode: str = "mean") -> ad.Tensor:
    _check_mode(mode)
    hidden = ad.leaky_relu(ad.conv2d(shared, params["out.hidden.w"], params["out.hidden.b"]), params.config.slope_outlier)
    return ad.sigmoid(separable_filter(hidden, params, rng, mode))


def forward(inp, params: RefinerParams, rng=None, mode: str = "mean", *, outlier_branch: bool = True) -> RefinementOutput:
    """Run the network on a :class:`RefinerInput` or a stacked array."""
    _check_mode(mode)
    if mode != "mean" and rng is None:
        raise ConfigError(f"mode {mode!r} needs a random generator")
    x = inp.stacked(params.config.d_max) if isinstance(inp, RefinerInput) else inp
    features = context_aggregate(x, params)
    delta, shared = regress_delta(features, params, rng, mode)
    p_out = detect_outliers(shared, params, rng, mode) if outlier_branch else None
    return RefinementOutput(delta, p_out)


def predict_disparity(d_raw: DisparityMap, output: RefinementOutput | np.ndarray) -> DisparityMap:
    delta = output.delta.data if isinstance(output, RefinementOutput) else np.asarray(output, dtype=np.float64)
    delta = delta.reshape(d_raw.disparity.shape)
    return DisparityMap(np.where(d_raw.valid, d_raw.disparity + delta, 0.0), d_raw.valid.copy())


def mc_predict(inp: RefinerInput, params: RefinerParams, n_samples: int, seed: int = 0, *, outlier_branch: bool = True):
    """Monte-Carlo mean and unbiased std of the refined disparity, plus the mean ``p_out``."""
    if n_samples < 2:
        raise ConfigError(f"Monte-Carlo prediction needs n_samples >= 2, got {n_samples}")
    rng = np.random.default_rng(seed)
    x = inp.stacked(params.config.d_max)
    base = inp.d_raw.disparity
    p_sum = np.zeros(base.shape)
    samples = []
    for _ in range(n_samples):
        out = forward(x, params, rng, "sample", outlier_branch=outlier_branch)
        samples.append(base + out.delta.data[0])
        if out.p_out is not None:
            p_sum += out.p_out.data[0]
    stack = np.stack(samples)
    mean = stack.mean(axis=0)
    std = stack.std(axis=0, ddof=1)
    p_mean = p_sum / n_samples if outlier_branch else None
    return mean, std, p_mean


# checkpoints -----------------------------------------------------------------


def save_checkpoint(params: RefinerParams, path, metadata: Optional[dict] = None) -> None:
    """Binary checkpoint with a trailing CRC32 over all preceding bytes.

    Layout (little-endian): magic, u32 version, u32 field count and u32
    architecture fields, u32 length and ``key = value`` text, u32 tensor
    count, then per tensor u32 name length, name, u32 ndim, u32 dims and the
    float64 payload.
    """
    arch_fields = params.arch.to_fields()
    meta = dict(params.config.to_mapping())
    meta.update({str(k): str(v) for k, v in (metadata or {}).items()})
    blob = "".join(f"{k} = {v}\n" for k, v in sorted(meta.items())).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(arch_fields)),
        struct.pack(f"<{len(arch_fields)}I", *arch_fields),
        struct.pack("<I", len(blob)),
        blob,
        struct.pack("<I", len(params.tensors)),
    ]
    for name, t in params.tensors.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{t.data.ndim}I", t.data.ndim, *t.data.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated: wanted {n} bytes", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, n: int) -> list[int]:
        return list(struct.unpack(f"<{n}I", self.take(4 * n)))


def _parse_checkpoint(path):
    buf = Path(path).read_bytes()
    if len(buf) < len(CHECKPOINT_MAGIC) + 4 or buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not an SDBN0001 checkpoint", 0)
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch", len(buf) - 4)
    r = _Reader(body)
    r.take(8)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    n_fields = r.u32()
    arch = Architecture.from_fields(r.u32s(n_fields))
    blob_len = r.u32()
    meta = {}
    for line in r.take(blob_len).decode("utf-8").splitlines():
        if line.strip():
            k, _, v = line.partition(" = ")
            meta[k.strip()] = v.strip()
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32s(ndim))
        count = int(np.prod(shape))
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = data
    if r.pos != len(body):
        raise FormatError("trailing bytes after checkpoint tensors", r.pos)
    return arch, meta, tensors


def read_checkpoint_metadata(path) -> dict[str, str]:
    return _parse_checkpoint(path)[1]


def load_checkpoint(path, expected: Optional[Architecture] = None) -> tuple[RefinerParams, dict[str, str]]:
    """Returns ``(params, metadata)``; rejects descriptor or tensor mismatches."""
    arch, meta, tensors = _parse_checkpoint(path)
    if expected is not None and arch != expected:
        raise FormatError(f"checkpoint architecture {arch} does not match expected {expected}")
    config = RefinerConfig.from_mapping(meta)
    reference = init_params(arch, config)
    if set(tensors) != set(reference.tensors):
        missing = sorted(set(reference.tensors) ^ set(tensors))
        raise FormatError(f"checkpoint tensors do not match the architecture: {missing}")
    out = {}
    for name, ref in reference.tensors.items():
        if tensors[name].shape != ref.shape:
            raise FormatError(f"tensor {name} has shape {tensors[name].shape}, expected {ref.shape}")
        out[name] = ad.Tensor(tensors[name], requires_grad=True, name=name)
    extra = {k: v for k, v in meta.items() if not k.startswith("refiner.")}
    return RefinerParams(arch, config, out), extra
