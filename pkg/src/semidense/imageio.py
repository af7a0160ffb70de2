"""Grayscale image and disparity map containers plus PFM/PNG I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError

__all__ = [
    "GrayImage",
    "DisparityMap",
    "read_pfm",
    "write_pfm",
    "read_png_gray",
    "write_png_gray",
    "quantize",
]


@dataclass
class GrayImage:
    """Luminance image, float64 values in [0, 1], shape ``(height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ConfigError(f"GrayImage needs a 2-D array, got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class DisparityMap:
    """Disparity in pixels with a validity mask; invalid pixels hold 0."""

    disparity: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.disparity = np.asarray(self.disparity, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.disparity.shape != self.valid.shape or self.disparity.ndim != 2:
            raise ConfigError("disparity and valid mask must be 2-D arrays of equal shape")
        self.valid &= np.isfinite(self.disparity)
        self.disparity = np.where(self.valid, self.disparity, 0.0)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "DisparityMap":
        """Build from an array where NaN/Inf marks invalid pixels."""
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.isfinite(values))

    @property
    def height(self) -> int:
        return self.disparity.shape[0]

    @property
    def width(self) -> int:
        return self.disparity.shape[1]

    def to_array(self) -> np.ndarray:
        """Disparity with NaN at invalid pixels."""
        return np.where(self.valid, self.disparity, np.nan)


def _readline(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise FormatError("PFM header line is not newline-terminated", pos)
    try:
        return buf[pos:end].decode("ascii").strip(), end + 1
    except UnicodeDecodeError:
        raise FormatError("PFM header is not ASCII", pos) from None


def read_pfm(path) -> DisparityMap:
    """Read a single-channel ``Pf`` file; non-finite samples become invalid.

    Rows are stored bottom-to-top; a negative scale means little-endian.
    """
    buf = Path(path).read_bytes()
    magic, pos = _readline(buf, 0)
    if magic != "Pf":
        if magic == "PF":
            raise FormatError("colour PFM (PF) is not supported", 0)
        raise FormatError(f"bad PFM magic {magic!r}", 0)
    dims_at = pos
    dims, pos = _readline(buf, pos)
    try:
        width, height = (int(v) for v in dims.split())
    except ValueError:
        raise FormatError(f"bad PFM dimensions {dims!r}", dims_at) from None
    if width <= 0 or height <= 0:
        raise FormatError(f"non-positive PFM dimensions {width}x{height}", dims_at)
    scale_at = pos
    scale_line, pos = _readline(buf, pos)
    try:
        scale = float(scale_line)
    except ValueError:
        raise FormatError(f"bad PFM scale {scale_line!r}", scale_at) from None
    if scale == 0:
        raise FormatError("PFM scale must be non-zero", scale_at)
    need = 4 * width * height
    if len(buf) - pos < need:
        raise FormatError(f"truncated PFM payload: need {need} bytes, have {len(buf) - pos}", len(buf))
    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos).reshape(height, width)
    return DisparityMap.from_array(np.flipud(values).astype(np.float64))


def write_pfm(disp: DisparityMap | np.ndarray, path, little_endian: bool = True) -> None:
    """Write a ``Pf`` file as float32 with invalid pixels stored as NaN."""
    values = disp.to_array() if isinstance(disp, DisparityMap) else np.asarray(disp, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise ConfigError(f"cannot write an empty or non 2-D map (shape {values.shape})")
    height, width = values.shape
    dtype = "<f4" if little_endian else ">f4"
    header = f"Pf\n{width} {height}\n{-1.0 if little_endian else 1.0}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.flipud(values).astype(dtype).tobytes())


def quantize(values: np.ndarray, bitdepth: int) -> np.ndarray:
    """Map [0, 1] floats to integer codes, rounding half away from zero."""
    if bitdepth not in (8, 16):
        raise ConfigError(f"bit depth must be 8 or 16, got {bitdepth}")
    top = (1 << bitdepth) - 1
    scaled = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * top
    return np.floor(scaled + 0.5).astype(np.uint16 if bitdepth == 16 else np.uint8)


def read_png_gray(path) -> GrayImage:
    """Load an 8- or 16-bit grayscale PNG, normalised by ``2**bits - 1``."""
    with Image.open(path) as im:
        mode = im.mode
        if mode == "L":
            arr = np.asarray(im, dtype=np.float64) / 255.0
        elif mode in ("I;16", "I;16B", "I;16L"):
            arr = np.asarray(im).astype(np.float64) / 65535.0
        elif mode == "I" and im.info.get("bits", 16) <= 16:
            # some Pillow builds decode 16-bit grayscale PNG as 32-bit "I"
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            raise FormatError(f"unsupported PNG mode {mode!r}: only 8/16-bit grayscale")
    return GrayImage(np.clip(arr, 0.0, 1.0))


def write_png_gray(img: GrayImage | np.ndarray, path, bitdepth: int = 16) -> None:
    data = img.data if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)
    codes = quantize(data, bitdepth)
    # uint8 -> mode "L", uint16 -> mode "I;16"
    Image.fromarray(codes).save(path, format="PNG")
