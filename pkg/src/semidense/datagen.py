"""Procedural rectified active-stereo pairs with subpixel ground truth.

Scenes are a smooth height field plus slanted planes and fronto-parallel
boxes, composited per pixel by maximum disparity (nearest surface wins). The
left view is a blurred binary speckle texture under a low-frequency albedo;
the right view is the left view forward-warped by the disparity with a
z-buffer and bilinear splatting.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .imageio import DisparityMap, GrayImage, read_pfm, read_png_gray, write_pfm, write_png_gray

__all__ = [
    "SceneConfig",
    "Scene",
    "SamplePair",
    "SampleRecord",
    "speckle_pattern",
    "random_scene",
    "rasterize",
    "gen_disparity",
    "render_pair",
    "gen_dataset",
    "read_manifest",
    "load_sample",
]

# splats whose disparity is this far behind the z-buffer are hidden
Z_TOLERANCE = 0.5
AMBIENT = 0.05


@dataclass
class SceneConfig:
    seed: int = 0
    width: int = 256
    height: int = 256
    d_min: float = 8.0
    d_max: float = 72.0
    n_planes: int = 2
    n_boxes: int = 3
    n_bumps: int = 4
    background: Optional[float] = None
    density: float = 0.25
    blur_sigma: float = 0.75
    noise_sigma: float = 0.01
    gain_range: tuple[float, float] = (0.8, 1.2)
    bias_range: tuple[float, float] = (-0.05, 0.05)
    albedo_range: tuple[float, float] = (0.25, 1.0)

    def __post_init__(self):
        self.gain_range = tuple(self.gain_range)
        self.bias_range = tuple(self.bias_range)
        self.albedo_range = tuple(self.albedo_range)
        self.validate()

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")
        if not 0 <= self.d_min < self.d_max < self.width:
            raise ConfigError(
                f"need 0 <= d_min < d_max < width, got d_min={self.d_min}, d_max={self.d_max}, width={self.width}"
            )
        if not 0 < self.density < 1:
            raise ConfigError(f"speckle density must be in (0, 1), got {self.density}")
        if min(self.n_planes, self.n_boxes, self.n_bumps) < 0:
            raise ConfigError("primitive counts must be non-negative")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ConfigError("blur and noise sigmas must be non-negative")
        for name in ("gain_range", "bias_range", "albedo_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} must be (low, high), got {(lo, hi)}")
        if self.gain_range[0] <= 0:
            raise ConfigError("gain must be positive")
        if self.background is not None and not self.d_min <= self.background <= self.d_max:
            raise ConfigError("background disparity outside [d_min, d_max]")


@dataclass
class Scene:
    """Explicit scene description: values in pixels of disparity."""

    background: float
    bumps: list[tuple[float, float, float, float]] = field(default_factory=list)  # cx, cy, sigma, amplitude
    planes: list[tuple[int, int, int, int, float, float, float]] = field(default_factory=list)  # x0, y0, x1, y1, d, gx, gy
    boxes: list[tuple[int, int, int, int, float]] = field(default_factory=list)  # x0, y0, x1, y1, d


@dataclass
class SamplePair:
    left: GrayImage
    right: GrayImage
    gt: DisparityMap
    occlusion: np.ndarray


@dataclass
class SampleRecord:
    id: str
    left: str
    right: str
    gt: str
    occ: str
    d_max: float
    seed: int


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def speckle_pattern(seed: int, width: int, height: int, density: float, blur_sigma: float) -> GrayImage:
    """Bernoulli dot field blurred by a Gaussian and stretched to [0, 1]."""
    dots = (_rng(seed, 0).random((height, width)) < density).astype(np.float64)
    img = ndimage.gaussian_filter(dots, blur_sigma, mode="reflect") if blur_sigma > 0 else dots
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return GrayImage(np.zeros_like(img) if hi <= 0 else np.ones_like(img))
    return GrayImage((img - lo) / (hi - lo))


def random_scene(config: SceneConfig) -> Scene:
    rng = _rng(config.seed, 1)
    lo, hi = config.d_min, config.d_max
    span = hi - lo
    w, h = config.width, config.height
    base = config.background if config.background is not None else rng.uniform(lo, lo + 0.4 * span)
    scene = Scene(background=float(base))
    for _ in range(config.n_bumps):
        scene.bumps.append((
            rng.uniform(0, w), rng.uniform(0, h),
            rng.uniform(0.08, 0.25) * max(w, h), rng.uniform(-0.1, 0.25) * span,
        ))
    for _ in range(config.n_planes):
        x0, y0 = int(rng.integers(0, w - 1)), int(rng.integers(0, h - 1))
        x1 = min(w, x0 + int(rng.integers(w // 6, w // 2 + 2)))
        y1 = min(h, y0 + int(rng.integers(h // 6, h // 2 + 2)))
        scene.planes.append((x0, y0, x1, y1, rng.uniform(lo + 0.2 * span, hi), rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15)))
    for _ in range(config.n_boxes):
        x0, y0 = int(rng.integers(0, w - 1)), int(rng.integers(0, h - 1))
        x1 = min(w, x0 + int(rng.integers(w // 10, w // 3 + 2)))
        y1 = min(h, y0 + int(rng.integers(h // 10, h // 3 + 2)))
        scene.boxes.append((x0, y0, x1, y1, rng.uniform(lo + 0.2 * span, hi)))
    return scene


def rasterize(scene: Scene, config: SceneConfig) -> DisparityMap:
    h, w = config.height, config.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.full((h, w), scene.background, dtype=np.float64)
    for cx, cy, sigma, amp in scene.bumps:
        d += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma * sigma))
    for x0, y0, x1, y1, dc, gx, gy in scene.planes:
        cx, cy = (x0 + x1 - 1) / 2, (y0 + y1 - 1) / 2
        region = (slice(y0, y1), slice(x0, x1))
        plane = dc + gx * (xx[region] - cx) + gy * (yy[region] - cy)
        d[region] = np.maximum(d[region], plane)
    for x0, y0, x1, y1, dc in scene.boxes:
        region = (slice(y0, y1), slice(x0, x1))
        d[region] = np.maximum(d[region], dc)
    d = np.clip(d, config.d_min, config.d_max)
    return DisparityMap(d, np.ones_like(d, dtype=bool))


def gen_disparity(config: SceneConfig) -> DisparityMap:
    return rasterize(random_scene(config), config)


def _albedo(config: SceneConfig) -> np.ndarray:
    rng = _rng(config.seed, 2)
    raw = ndimage.gaussian_filter(rng.random((config.height, config.width)), max(config.width, config.height) / 16, mode="reflect")
    lo, hi = raw.min(), raw.max()
    t = (raw - lo) / (hi - lo) if hi > lo else np.ones_like(raw)
    a0, a1 = config.albedo_range
    return a0 + (a1 - a0) * t


def _forward_warp(left: np.ndarray, disp: np.ndarray):
    """Splat ``left`` to ``x - disp``; returns (right, filled, occluded, in_view)."""
    h, w = left.shape
    ys, xs = np.mgrid[0:h, 0:w]
    xr = xs - disp
    x0 = np.floor(xr).astype(np.int64)
    frac = xr - x0

    targets, weights = [], []
    for offset, wt in ((0, 1.0 - frac), (1, frac)):
        t = x0 + offset
        ok = (t >= 0) & (t < w) & (wt > 1e-12)
        targets.append((t, ok))
        weights.append(wt)

    zbuf = np.full((h, w), -np.inf)
    for (t, ok), _ in zip(targets, weights):
        np.maximum.at(zbuf, (ys[ok], t[ok]), disp[ok])

    acc = np.zeros((h, w))
    wsum = np.zeros((h, w))
    for (t, ok), wt in zip(targets, weights):
        keep = ok.copy()
        keep[ok] = disp[ok] >= zbuf[ys[ok], t[ok]] - Z_TOLERANCE
        np.add.at(acc, (ys[keep], t[keep]), wt[keep] * left[keep])
        np.add.at(wsum, (ys[keep], t[keep]), wt[keep])

    filled = wsum > 1e-9
    right = np.where(filled, acc / np.where(filled, wsum, 1.0), 0.0)

    # consistency check against the dominant splat target
    t_main = np.where(frac < 0.5, x0, x0 + 1)
    in_view = (t_main >= 0) & (t_main < w)
    occluded = np.zeros((h, w), dtype=bool)
    tv = np.clip(t_main, 0, w - 1)
    occluded[in_view] = disp[in_view] < zbuf[ys[in_view], tv[in_view]] - Z_TOLERANCE
    return right, filled, occluded, in_view


def render_pair(gt: DisparityMap, config: SceneConfig) -> SamplePair:
    d = gt.disparity
    if d.shape != (config.height, config.width):
        raise ConfigError(f"ground truth shape {d.shape} does not match config {(config.height, config.width)}")
    if np.any(d[gt.valid] < config.d_min - 1e-9) or np.any(d[gt.valid] > config.d_max + 1e-9):
        raise ConfigError("ground truth outside [d_min, d_max]")

    albedo = _albedo(config)
    texture = speckle_pattern(config.seed, config.width, config.height, config.density, config.blur_sigma).data
    left = AMBIENT + (1.0 - 2 * AMBIENT) * albedo * texture

    right, filled, occluded, in_view = _forward_warp(left, d)
    # surfaces seen only by the right camera get their own texture
    fill_tex = speckle_pattern(config.seed + 7919, config.width, config.height, config.density, config.blur_sigma).data
    right = np.where(filled, right, AMBIENT + (1.0 - 2 * AMBIENT) * albedo.mean() * fill_tex)

    rng = _rng(config.seed, 3)
    if config.noise_sigma > 0:
        left = left + rng.normal(0.0, config.noise_sigma, left.shape)
        right = right + rng.normal(0.0, config.noise_sigma, right.shape)
    gain = rng.uniform(*config.gain_range)
    bias = rng.uniform(*config.bias_range)
    right = gain * right + bias

    valid = gt.valid & ~occluded & in_view
    return SamplePair(
        left=GrayImage(np.clip(left, 0.0, 1.0)),
        right=GrayImage(np.clip(right, 0.0, 1.0)),
        gt=DisparityMap(d, valid),
        occlusion=occluded,
    )


def _sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), index]).generate_state(1)[0])


def gen_dataset(config: SceneConfig, n_pairs: int, out_dir) -> list[SampleRecord]:
    """Render ``n_pairs`` samples into ``out_dir`` and write ``manifest.txt``."""
    if n_pairs < 0:
        raise ConfigError("n_pairs must be non-negative")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_pairs):
        seed = _sample_seed(config.seed, i)
        cfg = SceneConfig(**{**asdict(config), "seed": seed})
        pair = render_pair(gen_disparity(cfg), cfg)
        tag = f"{i:04d}"
        rec = SampleRecord(tag, f"left_{tag}.png", f"right_{tag}.png", f"gt_{tag}.pfm", f"occ_{tag}.png", float(config.d_max), seed)
        write_png_gray(pair.left, out / rec.left, 16)
        write_png_gray(pair.right, out / rec.right, 16)
        write_pfm(pair.gt, out / rec.gt)
        write_png_gray(pair.occlusion.astype(np.float64), out / rec.occ, 8)
        records.append(rec)
    with open(out / "manifest.txt", "w") as f:
        for r in records:
            f.write(f"{r.id} {r.left} {r.right} {r.gt} {r.occ} {r.d_max!r} {r.seed}\n")
    return records


def read_manifest(path) -> list[SampleRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ConfigError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        records.append(SampleRecord(parts[0], parts[1], parts[2], parts[3], parts[4], float(parts[5]), int(parts[6])))
    return records


def load_sample(record: SampleRecord, root) -> SamplePair:
    root = Path(root)
    occ_path = root / record.occ
    occ = read_png_gray(occ_path).data > 0.5 if occ_path.exists() else None
    gt = read_pfm(root / record.gt)
    if occ is None:
        occ = ~gt.valid
    return SamplePair(read_png_gray(root / record.left), read_png_gray(root / record.right), gt, occ)
