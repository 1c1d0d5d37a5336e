"""Material recognition from thermal textures: per-frame dynamic-range
quantization, a small numpy CNN with an optional spatial transformer,
k-fold evaluation and a TCP classification service."""

from .thermal import (
    QuantizationRange,
    QuantizedImage,
    Roi,
    ThermalFrame,
    center_crop,
    quantize,
    range_over_roi,
    thermal_dynamics,
)

__version__ = "0.1.0"

__all__ = [
    "QuantizationRange",
    "QuantizedImage",
    "Roi",
    "ThermalFrame",
    "center_crop",
    "quantize",
    "range_over_roi",
    "thermal_dynamics",
]
