"""Exact wide-accumulator (quire) multiply-accumulate and dot product.

Operands decode to signed integer numerators at a fixed number of
fractional places; products accumulate without rounding in a plain Python
int, and the single rounding happens when the finished sum is encoded into
the output format.  The quire width formula

    width = ceil(log2 m) + 2 * ceil(log2(max_magnitude / min_positive)) + 2

(using the larger dynamic-range ratio of the two operand formats) bounds the
accumulator for m products at the operand extremes; the no-overflow claim
|acc| < 2^(width-1) is a hardware-sizing contract checked in tests, not a
limit of this implementation.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

from .formats import (
    FormatConfig,
    FxpConfig,
    TfxConfig,
    quantize_real,
    signed_code,
    unpack,
)

__all__ = [
    "DecodedOperand",
    "Quire",
    "quire_width",
    "decode_operand",
    "mac",
    "finalize",
    "dot",
    "frac_places",
    "scale_magnitude",
]


@dataclass(frozen=True)
class DecodedOperand:
    """Sign and unsigned numerator of one operand at ``frac_places`` places."""

    sign: int  # +1 or -1 (zero decodes with sign +1)
    magnitude: int
    frac_places: int


def frac_places(cfg: FormatConfig) -> int:
    """Fractional places that make every numerator of ``cfg`` an integer.

    n-2 places suffice except in uniform mode (IS = 1), whose fraction field
    is one bit wider.
    """
    if isinstance(cfg, FxpConfig):
        return cfg.frac_bits
    return cfg.n - 1 if cfg.is_max == 1 else cfg.n - 2


def scale_magnitude(cfg: FormatConfig) -> int:
    """|SC| of the format; the quire denominator absorbs this scale."""
    return -cfg.sc if isinstance(cfg, TfxConfig) else 0


def _ceil_log2(x: int) -> int:
    return (x - 1).bit_length()


def _range_ratio_bits(cfg: FormatConfig) -> int:
    """ceil(log2) of the format's dynamic-range ratio, scale-independent."""
    if isinstance(cfg, FxpConfig):
        return cfg.n - 1  # |min_neg| / min_pos = 2^(n-1)
    if cfg.is_max == 1:
        return cfg.n - 1
    return _ceil_log2(cfg.is_max << (cfg.n - 2))


def quire_width(m_mults: int, cfg_w: FormatConfig, cfg_a: FormatConfig) -> int:
    """Accumulator width in bits for ``m_mults`` products of w and a codes."""
    if m_mults < 1:
        raise ValueError(f"m_mults must be >= 1, got {m_mults}")
    ratio_bits = max(_range_ratio_bits(cfg_w), _range_ratio_bits(cfg_a))
    return _ceil_log2(m_mults) + 2 * ratio_bits + 2


@lru_cache(maxsize=None)
def _operand_table(cfg: FormatConfig) -> tuple[tuple[int, ...], int]:
    """Signed numerators of all codes (indexed by unsigned code), and places."""
    places = frac_places(cfg)
    if isinstance(cfg, FxpConfig):
        nums = tuple(signed_code(c, cfg.n) for c in range(1 << cfg.n))
        return nums, places
    nums = []
    for code in range(1 << cfg.n):
        u = unpack(code, cfg)
        # (I + f/2^fs) * 2^places, exact because places >= fs.
        nums.append(
            u.int_value * (1 << places)
            + u.frac_numerator * (1 << (places - u.frac_bits))
        )
    return tuple(nums), places


def decode_operand(code: int, cfg: FormatConfig) -> DecodedOperand:
    """Exact signed numerator of a code, unscaled (SC handled by the quire)."""
    nums, places = _operand_table(cfg)
    num = nums[code]
    return DecodedOperand(
        sign=-1 if num < 0 else 1, magnitude=abs(num), frac_places=places
    )


@dataclass
class Quire:
    """Single-owner exact accumulator for one dot product.

    ``acc`` holds sum of signed product numerators; the represented value is
    acc / 2^denom_exp.  ``add_value`` widens the binary point as needed, so
    exact dyadic addends (a bias, a residual term) join without rounding.
    """

    width: int
    denom_exp: int
    m_mults: int
    cfg_w: FormatConfig
    cfg_a: FormatConfig
    acc: int = 0
    count: int = 0

    @classmethod
    def for_dot(
        cls, m_mults: int, cfg_w: FormatConfig, cfg_a: FormatConfig
    ) -> "Quire":
        denom = (
            frac_places(cfg_w)
            + frac_places(cfg_a)
            + scale_magnitude(cfg_w)
            + scale_magnitude(cfg_a)
        )
        return cls(
            width=quire_width(m_mults, cfg_w, cfg_a),
            denom_exp=denom,
            m_mults=m_mults,
            cfg_w=cfg_w,
            cfg_a=cfg_a,
        )

    def mac(self, w_code: int, a_code: int) -> "Quire":
        """Accumulate one exact product; the product sign is the XOR rule."""
        if self.count >= self.m_mults:
            raise RuntimeError(
                f"quire sized for {self.m_mults} products already holds {self.count}"
            )
        w_nums, _ = _operand_table(self.cfg_w)
        a_nums, _ = _operand_table(self.cfg_a)
        self.acc += w_nums[w_code] * a_nums[a_code]
        self.count += 1
        return self

    def add_value(self, value: Fraction | float | int) -> "Quire":
        """Add an exact dyadic rational, widening the binary point if needed."""
        frac = Fraction(value)
        q = frac.denominator
        if q & (q - 1):
            raise ValueError(f"addend {value!r} is not a dyadic rational")
        e = q.bit_length() - 1
        if e > self.denom_exp:
            self.acc <<= e - self.denom_exp
            self.denom_exp = e
        self.acc += frac.numerator << (self.denom_exp - e)
        return self

    def value(self) -> Fraction:
        return Fraction(self.acc, 1 << self.denom_exp)

    def finalize(self, out_cfg: FormatConfig) -> int:
        """Round the exact sum once into the output format."""
        return quantize_real(self.value(), out_cfg)


def mac(
    q: Quire, w_code: int, a_code: int, cfg_w: FormatConfig, cfg_a: FormatConfig
) -> Quire:
    if (cfg_w, cfg_a) != (q.cfg_w, q.cfg_a):
        raise ValueError("operand configs do not match the quire's")
    return q.mac(w_code, a_code)


def finalize(q: Quire, out_cfg: FormatConfig) -> int:
    return q.finalize(out_cfg)


def dot(
    w_codes: Sequence[int],
    a_codes: Sequence[int],
    cfg_w: FormatConfig,
    cfg_a: FormatConfig,
    out_cfg: FormatConfig,
) -> int:
    """Exact dot product with a single final rounding into ``out_cfg``."""
    if len(w_codes) != len(a_codes):
        raise ValueError(f"length mismatch: {len(w_codes)} vs {len(a_codes)}")
    q = Quire.for_dot(max(len(w_codes), 1), cfg_w, cfg_a)
    for w, a in zip(w_codes, a_codes):
        q.mac(w, a)
    return q.finalize(out_cfg)
