"""Per-layer format parameter selection from tensor statistics.

The tapered-format rule sizes the unary integer field from the largest
absolute parameter value and scales weight lattices down by a power of two
when the whole layer fits below 0.5.  The fixed-point baseline instead
scans fraction widths for the finest lattice that still covers the range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from .formats import MAX_BITS, MIN_BITS, MIN_SCALE, FxpConfig, TfxConfig, extremes

__all__ = [
    "LayerStats",
    "FormatAssignment",
    "tensor_stats",
    "select_params",
    "select_fxp_params",
]


@dataclass(frozen=True)
class LayerStats:
    """Largest absolute weight and activation seen in one layer."""

    w_amax: float
    a_amax: float

    def __post_init__(self) -> None:
        for name, v in (("w_amax", self.w_amax), ("a_amax", self.a_amax)):
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class FormatAssignment:
    """Selected tapered-format parameters for one layer."""

    is_w: int
    is_a: int
    sc_w: int
    n: int

    @property
    def weight_config(self) -> TfxConfig:
        return TfxConfig(self.n, self.is_w, self.sc_w)

    @property
    def activation_config(self) -> TfxConfig:
        return TfxConfig(self.n, self.is_a, 0)  # activations are never scaled


def tensor_stats(values: Iterable[float]) -> float:
    """Largest absolute value of a non-empty sequence."""
    amax = None
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite value {v} in tensor")
        a = abs(v)
        if amax is None or a > amax:
            amax = a
    if amax is None:
        raise ValueError("empty tensor has no statistics")
    return float(amax)


def _integer_field(amax: float, n: int) -> int:
    width = math.floor(amax) + 1
    return min(width, n) if width >= 1 else 1


def select_params(stats: LayerStats, n: int) -> FormatAssignment:
    """Size the integer fields from the range maxima; scale small weights.

    The weight scale activates only below 0.5 and is clamped to the format's
    scale domain.  A degenerate all-zero weight tensor gets the narrowest
    field and no scale (every code then quantizes to zero anyway).
    """
    if not MIN_BITS <= n <= MAX_BITS:
        raise ValueError(f"bit width must be in [{MIN_BITS}, {MAX_BITS}], got {n}")
    is_w = _integer_field(stats.w_amax, n)
    is_a = _integer_field(stats.a_amax, n)
    sc_w = 0
    if 0 < stats.w_amax < 0.5:
        sc_w = max(math.floor(math.log2(stats.w_amax)) + 1, MIN_SCALE)
    return FormatAssignment(is_w=is_w, is_a=is_a, sc_w=sc_w, n=n)


def select_fxp_params(amax: float, n: int) -> FxpConfig:
    """Finest fixed-point lattice whose range still covers ``amax``.

    Scans frac_bits downward from n-1; if even the coarsest lattice clips,
    returns frac_bits = 1 (maximal range).
    """
    if not MIN_BITS <= n <= MAX_BITS:
        raise ValueError(f"bit width must be in [{MIN_BITS}, {MAX_BITS}], got {n}")
    if not math.isfinite(amax) or amax < 0:
        raise ValueError(f"amax must be finite and >= 0, got {amax}")
    for frac_bits in range(n - 1, 0, -1):
        if amax <= extremes(FxpConfig(n, frac_bits)).max_pos:
            return FxpConfig(n, frac_bits)
    return FxpConfig(n, 1)
