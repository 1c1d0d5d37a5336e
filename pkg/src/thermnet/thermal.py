"""Radiometric frames, center cropping and per-frame dynamic-range quantization.

A frame holds apparent temperatures in degrees Celsius. Quantization maps the
temperatures inside a square region of interest linearly onto an integer pixel
range ``[lo, hi]`` using that frame's own minimum and maximum, so absolute
temperature (and therefore ambient conditions) drops out and only the spatial
pattern survives.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptFile, CropTooLarge, EmptyInput, NonFiniteTemperature

DTIF_MAGIC = b"DTIF"
DTIF_VERSION = 1
_DTIF_HEADER = struct.Struct("<4sHII")

# Values this close below a .5 boundary are treated as the boundary itself, so
# that exact halves survive float noise from offsets (e.g. 127.4999999 -> 128).
_HALF_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ThermalFrame:
    """One radiometric frame; ``temps`` is a (height, width) matrix in degC."""

    temps: np.ndarray
    frame_index: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        temps = np.asarray(self.temps)
        if temps.ndim != 2 or temps.shape[0] < 1 or temps.shape[1] < 1:
            raise ValueError(f"temps must be a non-empty 2-D matrix, got shape {temps.shape}")
        if not np.all(np.isfinite(temps)):
            raise NonFiniteTemperature("frame contains non-finite temperatures")
        object.__setattr__(self, "temps", temps)

    @property
    def width(self) -> int:
        return self.temps.shape[1]

    @property
    def height(self) -> int:
        return self.temps.shape[0]


@dataclass(frozen=True)
class Roi:
    x0: int
    y0: int
    n: int

    def check(self, frame: ThermalFrame) -> None:
        if self.n < 1 or self.x0 < 0 or self.y0 < 0:
            raise CropTooLarge(f"invalid roi {self}")
        if self.x0 + self.n > frame.width or self.y0 + self.n > frame.height:
            raise CropTooLarge(
                f"roi {self} does not fit a {frame.width}x{frame.height} frame"
            )

    def extract(self, frame: ThermalFrame) -> np.ndarray:
        self.check(frame)
        return frame.temps[self.y0 : self.y0 + self.n, self.x0 : self.x0 + self.n]


@dataclass(frozen=True)
class QuantizationRange:
    lo: int = 0
    hi: int = 255

    def __post_init__(self):
        if int(self.lo) != self.lo or int(self.hi) != self.hi:
            raise ValueError("quantization bounds must be integers")
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")


@dataclass(frozen=True, eq=False)
class QuantizedImage:
    """Square quantized image. ``pixels`` is (n, n); ``dynamics`` is T2 - T1 in degC."""

    pixels: np.ndarray
    dynamics: float
    lo: int = 0
    hi: int = 255

    @property
    def n(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, QuantizedImage):
            return NotImplemented
        return (
            self.lo == other.lo
            and self.hi == other.hi
            and self.dynamics == other.dynamics
            and self.pixels.shape == other.pixels.shape
            and bool(np.array_equal(self.pixels, other.pixels))
        )

    __hash__ = None


def center_crop(frame: ThermalFrame, n: int = 75) -> Roi:
    if n < 1:
        raise CropTooLarge(f"crop side must be >= 1, got {n}")
    if n > frame.width or n > frame.height:
        raise CropTooLarge(
            f"cannot crop {n}x{n} from a {frame.width}x{frame.height} frame"
        )
    return Roi((frame.width - n) // 2, (frame.height - n) // 2, n)


def range_over_roi(frame: ThermalFrame, roi: Roi) -> tuple[float, float]:
    region = roi.extract(frame)
    return float(region.min()), float(region.max())


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero."""
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5 + _HALF_TOL)


def quantize(
    frame: ThermalFrame,
    roi: Roi | None = None,
    qrange: QuantizationRange = QuantizationRange(),
    *,
    rounding: bool = True,
) -> QuantizedImage:
    """Quantize the ROI of ``frame`` onto ``[qrange.lo, qrange.hi]``.

    With ``rounding=False`` the real-valued map is returned unrounded (used
    by invariance tests). A flat ROI (T2 == T1) maps to all ``lo``.
    """
    if roi is None:
        roi = center_crop(frame, min(frame.width, frame.height))
    region = np.asarray(roi.extract(frame), dtype=np.float64)
    if not np.all(np.isfinite(region)):
        raise NonFiniteTemperature("roi contains non-finite temperatures")
    t1, t2 = float(region.min()), float(region.max())
    span = t2 - t1
    width = qrange.hi - qrange.lo
    if span == 0.0:
        scaled = np.zeros_like(region)
    else:
        scaled = width * ((region - t1) / span)
    if rounding:
        pixels = qrange.lo + np.clip(round_half_away(scaled), 0, width)
        pixels = pixels.astype(np.int64)
    else:
        pixels = qrange.lo + np.clip(scaled, 0, width)
    return QuantizedImage(pixels, span, qrange.lo, qrange.hi)


@dataclass(frozen=True)
class DynamicsStats:
    minimum: float
    maximum: float
    mean: float
    sd: float
    count: int


def thermal_dynamics(
    images: Iterable[QuantizedImage | float], ddof: int = 0
) -> DynamicsStats:
    """Summary statistics of per-image thermal dynamics (T2 - T1).

    Accepts images or raw dynamics values. ``ddof=0`` is the population SD.
    """
    values = np.array(
        [im.dynamics if isinstance(im, QuantizedImage) else float(im) for im in images],
        dtype=np.float64,
    )
    if values.size == 0:
        raise EmptyInput("thermal_dynamics needs at least one image")
    sd = float(values.std(ddof=ddof)) if values.size > ddof else 0.0
    return DynamicsStats(
        float(values.min()), float(values.max()), float(values.mean()), sd, int(values.size)
    )


# --- DTIF frame files -------------------------------------------------------


def encode_dtif(frame: ThermalFrame) -> bytes:
    temps = np.ascontiguousarray(frame.temps, dtype="<f4")
    return _DTIF_HEADER.pack(DTIF_MAGIC, DTIF_VERSION, frame.width, frame.height) + temps.tobytes()


def decode_dtif(buf: bytes, frame_index: int = 0, source: str = "<bytes>") -> ThermalFrame:
    if len(buf) < _DTIF_HEADER.size:
        raise CorruptFile(f"{source}: truncated DTIF header")
    magic, version, width, height = _DTIF_HEADER.unpack_from(buf)
    if magic != DTIF_MAGIC:
        raise CorruptFile(f"{source}: bad DTIF magic {magic!r}")
    if version != DTIF_VERSION:
        raise CorruptFile(f"{source}: unsupported DTIF version {version}")
    if width < 1 or height < 1:
        raise CorruptFile(f"{source}: invalid frame size {width}x{height}")
    expected = _DTIF_HEADER.size + 4 * width * height
    if len(buf) != expected:
        raise CorruptFile(f"{source}: expected {expected} bytes, found {len(buf)}")
    temps = np.frombuffer(buf, dtype="<f4", offset=_DTIF_HEADER.size).reshape(height, width)
    try:
        return ThermalFrame(temps.astype(np.float32), frame_index=frame_index)
    except NonFiniteTemperature as exc:
        raise CorruptFile(f"{source}: {exc}") from None


def write_dtif(path: str | Path, frame: ThermalFrame) -> None:
    Path(path).write_bytes(encode_dtif(frame))


def read_dtif(path: str | Path, frame_index: int = 0) -> ThermalFrame:
    path = Path(path)
    return decode_dtif(path.read_bytes(), frame_index=frame_index, source=str(path))


def crop_and_quantize(
    frame: ThermalFrame, n: int = 75, qrange: QuantizationRange = QuantizationRange()
) -> QuantizedImage:
    return quantize(frame, center_crop(frame, n), qrange)


def stack_pixels(images: Sequence[QuantizedImage]) -> np.ndarray:
    return np.stack([im.pixels for im in images])
