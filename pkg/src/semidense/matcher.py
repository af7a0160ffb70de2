"""Coarse-to-fine ZNCC block matching and the truncated cost volume.

All window sampling clamps coordinates to the image border. The scalar
:func:`zncc` and the vectorised paths share :func:`zncc_windows`, so a
volume entry is bit-identical to the scalar score at the same disparity.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import struct

import numpy as np

from .errors import ConfigError, FormatError
from .imageio import DisparityMap, GrayImage

__all__ = [
    "MatchConfig",
    "TruncatedCostVolume",
    "zncc",
    "zncc_windows",
    "full_volume",
    "match_hierarchical",
    "truncate_volume",
    "write_volume",
    "read_volume",
]

VOLUME_MAGIC = b"SDCV0001"
ROW_BAND = 64


@dataclass
class MatchConfig:
    radius: int = 3
    levels: int = 3
    half_range: int = 2
    d_max: int = 72
    eps: float = 1e-9
    var_floor: float = 1e-4

    def __post_init__(self):
        if self.radius < 1:
            raise ConfigError(f"window radius must be >= 1, got {self.radius}")
        if self.levels < 1:
            raise ConfigError(f"pyramid levels must be >= 1, got {self.levels}")
        if self.d_max < 1:
            raise ConfigError(f"d_max must be >= 1, got {self.d_max}")
        if self.half_range < 1:
            raise ConfigError(f"half_range must be >= 1, got {self.half_range}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")


@dataclass
class TruncatedCostVolume:
    """ZNCC similarities at ``d_raw + k`` for ``k`` in ``[-K, K]`` plus support."""

    K: int
    slices: np.ndarray  # (2K+1, H, W)
    chi: np.ndarray  # (2K+1, H, W), 0/1

    @property
    def shape(self) -> tuple[int, int]:
        return self.slices.shape[1:]


def _images(left, right) -> tuple[np.ndarray, np.ndarray]:
    l = left.data if isinstance(left, GrayImage) else np.asarray(left, dtype=np.float64)
    r = right.data if isinstance(right, GrayImage) else np.asarray(right, dtype=np.float64)
    if l.shape != r.shape or l.ndim != 2:
        raise ConfigError(f"left and right images must have equal 2-D shapes, got {l.shape} and {r.shape}")
    return l, r


def zncc_windows(lw: np.ndarray, rw: np.ndarray, eps: float) -> np.ndarray:
    """ZNCC along the last axis of two window stacks."""
    dl = lw - lw.mean(axis=-1, keepdims=True)
    dr = rw - rw.mean(axis=-1, keepdims=True)
    num = (dl * dr).sum(axis=-1)
    den = np.sqrt((dl * dl).sum(axis=-1)) * np.sqrt((dr * dr).sum(axis=-1)) + eps
    return num / den


def _offsets(radius: int) -> tuple[np.ndarray, np.ndarray]:
    dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return dy.ravel(), dx.ravel()


def zncc(left, right, p: tuple[int, int], d: int, radius: int = 3, eps: float = 1e-9) -> float:
    """Score the window at ``p = (row, col)`` in the left image against
    ``(row, col - d)`` in the right image."""
    l, r = _images(left, right)
    h, w = l.shape
    dy, dx = _offsets(radius)
    rows = np.clip(p[0] + dy, 0, h - 1)
    lw = l[rows, np.clip(p[1] + dx, 0, w - 1)]
    rw = r[rows, np.clip(p[1] + dx - d, 0, w - 1)]
    return float(zncc_windows(lw, rw, eps))


class _WindowMatcher:
    """Left windows of one pyramid level, evaluated band by band."""

    def __init__(self, left: np.ndarray, right: np.ndarray, radius: int, eps: float):
        self.left, self.right, self.eps = left, right, eps
        self.h, self.w = left.shape
        self.dy, self.dx = _offsets(radius)

    def _bands(self):
        for y0 in range(0, self.h, ROW_BAND):
            y1 = min(self.h, y0 + ROW_BAND)
            ys, xs = np.mgrid[y0:y1, 0:self.w]
            rows = np.clip(ys[..., None] + self.dy, 0, self.h - 1)
            yield slice(y0, y1), rows, xs

    def scores(self, disp: np.ndarray) -> np.ndarray:
        """ZNCC at a per-pixel integer disparity map."""
        out = np.empty((self.h, self.w))
        for band, rows, xs in self._bands():
            lw = self.left[rows, np.clip(xs[..., None] + self.dx, 0, self.w - 1)]
            shifted = xs - disp[band]
            rw = self.right[rows, np.clip(shifted[..., None] + self.dx, 0, self.w - 1)]
            out[band] = zncc_windows(lw, rw, self.eps)
        return out

    def left_std(self) -> np.ndarray:
        out = np.empty((self.h, self.w))
        for band, rows, xs in self._bands():
            lw = self.left[rows, np.clip(xs[..., None] + self.dx, 0, self.w - 1)]
            out[band] = lw.std(axis=-1)
        return out


def full_volume(left, right, d_max: int, radius: int = 3, eps: float = 1e-9) -> np.ndarray:
    """Dense ``(d_max + 1, H, W)`` volume of ZNCC scores."""
    l, r = _images(left, right)
    m = _WindowMatcher(l, r, radius, eps)
    return np.stack([m.scores(np.full(l.shape, d, dtype=np.int64)) for d in range(d_max + 1)])


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    rows = np.minimum(np.arange(h + h % 2), h - 1)
    cols = np.minimum(np.arange(w + w % 2), w - 1)
    p = img[rows][:, cols]
    return p.reshape(p.shape[0] // 2, 2, p.shape[1] // 2, 2).mean(axis=(1, 3))


def _argmax_over(m: _WindowMatcher, candidates, lo: int, hi: int):
    """Best candidate per pixel; candidates are visited in increasing
    disparity so ties keep the smaller one."""
    best_d = best_s = None
    for cand in candidates:
        cand = np.clip(cand, lo, hi)
        s = m.scores(cand)
        if best_d is None:
            best_d, best_s = cand.copy(), s
            continue
        better = s > best_s
        best_d[better] = cand[better]
        best_s[better] = s[better]
    return best_d, best_s


def match_hierarchical(left, right, config: MatchConfig | None = None, *, details: bool = False):
    """Integer raw disparity by coarse-to-fine ZNCC search.

    The coarsest level searches every disparity; each finer level searches
    ``2 * upsampled estimate +- half_range``. Pixels are invalid when the best
    score is negative, the left window is flat, the full-resolution search
    range leaves ``[0, d_max]``, or the match falls outside the right image.

    With ``details=True`` also returns a dict holding the best ``score`` and
    the final-level ``search_center`` per pixel.
    """
    config = config or MatchConfig()
    l, r = _images(left, right)
    pyramid = [(l, r)]
    for _ in range(config.levels - 1):
        pl, pr = pyramid[-1]
        pyramid.append((_downsample(pl), _downsample(pr)))

    top = config.levels - 1
    dmax_top = -(-config.d_max // 2**top)
    m = _WindowMatcher(*pyramid[top], config.radius, config.eps)
    shape = pyramid[top][0].shape
    disp, score = _argmax_over(m, (np.full(shape, d, dtype=np.int64) for d in range(dmax_top + 1)), 0, dmax_top)

    base = disp
    for level in range(top - 1, -1, -1):
        pl, pr = pyramid[level]
        h, w = pl.shape
        base = 2 * np.repeat(np.repeat(disp, 2, axis=0), 2, axis=1)[:h, :w]
        dmax_l = config.d_max if level == 0 else -(-config.d_max // 2**level)
        m = _WindowMatcher(pl, pr, config.radius, config.eps)
        offsets = range(-config.half_range, config.half_range + 1)
        disp, score = _argmax_over(m, (base + j for j in offsets), 0, dmax_l)

    h, w = l.shape
    if config.levels > 1:
        in_range = (base - config.half_range >= 0) & (base + config.half_range <= config.d_max)
    else:
        in_range = np.ones((h, w), dtype=bool)
    textured = m.left_std() >= config.var_floor
    cols = np.arange(w)[None, :]
    valid = (score >= 0) & textured & in_range & (cols - disp >= 0)
    result = DisparityMap(disp.astype(np.float64), valid)
    if details:
        return result, {"score": score, "search_center": base}
    return result


def truncate_volume(left, right, d_raw: DisparityMap, K: int, radius: int = 3, d_max: int = 72, eps: float = 1e-9) -> TruncatedCostVolume:
    """Scores at ``d_raw + k``, zero-filled where ``d_raw + k`` leaves ``[0, d_max]``."""
    if K < 0:
        raise ConfigError(f"K must be non-negative, got {K}")
    l, r = _images(left, right)
    if d_raw.disparity.shape != l.shape:
        raise ConfigError("raw disparity shape does not match the images")
    base = d_raw.disparity
    if np.any(base[d_raw.valid] != np.round(base[d_raw.valid])):
        raise ConfigError("raw disparity must be integer-valued at valid pixels")
    base = np.where(d_raw.valid, base, 0).astype(np.int64)
    m = _WindowMatcher(l, r, radius, eps)
    n = 2 * K + 1
    slices = np.zeros((n,) + l.shape)
    chi = np.zeros((n,) + l.shape)
    for i, k in enumerate(range(-K, K + 1)):
        cand = base + k
        support = d_raw.valid & (cand >= 0) & (cand <= d_max)
        if not support.any():
            continue
        s = m.scores(np.clip(cand, 0, d_max))
        slices[i] = np.where(support, s, 0.0)
        chi[i] = support
    return TruncatedCostVolume(K, slices, chi)


def write_volume(vol: TruncatedCostVolume, path) -> None:
    """``SDCV0001``, u32 K, H, W, then float32 slices and chi, little-endian."""
    h, w = vol.shape
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<III", vol.K, h, w))
        f.write(vol.slices.astype("<f4").tobytes())
        f.write(vol.chi.astype("<f4").tobytes())


def read_volume(path) -> TruncatedCostVolume:
    buf = Path(path).read_bytes()
    if buf[:8] != VOLUME_MAGIC:
        raise FormatError("not an SDCV0001 volume", 0)
    if len(buf) < 20:
        raise FormatError("truncated volume header", len(buf))
    K, h, w = struct.unpack_from("<III", buf, 8)
    n = (2 * K + 1) * h * w
    if len(buf) != 20 + 8 * n:
        raise FormatError(f"volume payload should be {8 * n} bytes, found {len(buf) - 20}", 20)
    slices = np.frombuffer(buf, "<f4", n, 20).reshape(2 * K + 1, h, w).astype(np.float64)
    chi = np.frombuffer(buf, "<f4", n, 20 + 4 * n).reshape(2 * K + 1, h, w).astype(np.float64)
    return TruncatedCostVolume(K, slices, chi)
