"""Bit-exact encode/decode for the tapered fixed-point (TFX) scalar format
and the two's-complement fixed-point (FXP) baseline.

A TFX(n, IS, SC) value stores its integer part in signed unary: the flipped
sign bit is the first run digit, the run of identical digits continues until
a differing terminator bit or until IS digits have been seen (in which case
no terminator is stored), and the remaining low bits hold the fraction.  The
decoded value is (I + f/2^fs) * 2^SC, so spacing is dense near zero and
widens with magnitude, while FXP(n, frac) is the usual uniform lattice.

Codes are plain ints holding the unsigned n-bit pattern.  All scalar
operations are exact (``fractions.Fraction``); the vectorized helpers work
on *signed* code arrays (two's-complement interpretation), which by the
monotonicity invariant sort in value order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Union

import numpy as np

__all__ = [
    "MIN_BITS",
    "MAX_BITS",
    "MIN_SCALE",
    "MAX_SCALE",
    "TfxConfig",
    "FxpConfig",
    "FormatConfig",
    "UnpackedTfx",
    "FormatExtremes",
    "FormatParseError",
    "unpack",
    "pack",
    "to_real",
    "decode",
    "extremes",
    "dynamic_range",
    "enumerate_values",
    "quantize_real",
    "value_table",
    "quantize_array",
    "decode_array",
    "IntegerLattice",
    "integer_lattice",
    "signed_code",
    "unsigned_code",
    "parse_format",
]

MIN_BITS = 2
MAX_BITS = 16  # keeps exhaustive enumeration (2^n codes) cheap
MIN_SCALE = -4  # 3-bit scale magnitude, non-positive by construction
MAX_SCALE = 0


class FormatParseError(ValueError):
    """A format descriptor string could not be parsed."""


# ── Format descriptors ───────────────────────────────────────────


@dataclass(frozen=True)
class TfxConfig:
    """TFX(n, IS, SC): n total bits, IS max unary run, SC power-of-two scale."""

    n: int
    is_max: int
    sc: int = 0

    def __post_init__(self) -> None:
        if not MIN_BITS <= self.n <= MAX_BITS:
            raise ValueError(f"n must be in [{MIN_BITS}, {MAX_BITS}], got {self.n}")
        if not 1 <= self.is_max <= self.n:
            raise ValueError(f"is_max must be in [1, {self.n}], got {self.is_max}")
        if not MIN_SCALE <= self.sc <= MAX_SCALE:
            raise ValueError(f"sc must be in [{MIN_SCALE}, {MAX_SCALE}], got {self.sc}")

    @property
    def mask(self) -> int:
        return (1 << self.n) - 1

    @property
    def descriptor(self) -> str:
        return f"tfx:{self.n}/{self.is_max}/{self.sc}"


@dataclass(frozen=True)
class FxpConfig:
    """Two's-complement fixed point: n-bit integer scaled by 2^-frac_bits."""

    n: int
    frac_bits: int

    def __post_init__(self) -> None:
        if not MIN_BITS <= self.n <= MAX_BITS:
            raise ValueError(f"n must be in [{MIN_BITS}, {MAX_BITS}], got {self.n}")
        if not 1 <= self.frac_bits <= self.n - 1:
            raise ValueError(
                f"frac_bits must be in [1, {self.n - 1}], got {self.frac_bits}"
            )

    @property
    def mask(self) -> int:
        return (1 << self.n) - 1

    @property
    def descriptor(self) -> str:
        return f"fxp:{self.n}/{self.frac_bits}"


FormatConfig = Union[TfxConfig, FxpConfig]


@dataclass(frozen=True)
class UnpackedTfx:
    """Decoded fields of one TFX code.

    ``int_value`` already carries the sign of the number (I = m-1 for a run
    of ones, I = -m for a run of zeros); ``sign`` mirrors the sign bit.
    """

    sign: int  # +1 or -1
    int_value: int  # I
    frac_numerator: int  # f, 0 <= f < 2^frac_bits
    frac_bits: int  # fs
    run_length: int  # m, 1 <= m <= IS


@dataclass(frozen=True)
class FormatExtremes:
    """Exact clip bounds of a format: largest/smallest representable values."""

    max_pos: Fraction
    min_neg: Fraction
    min_pos: Fraction  # smallest positive nonzero magnitude


# ── TFX scalar codec ─────────────────────────────────────────────


def unpack(code: int, cfg: TfxConfig) -> UnpackedTfx:
    """Decode an n-bit pattern into sign, integer run, and fraction fields.

    Every n-bit pattern decodes; the all-zeros code is the unique zero.
    """
    n = cfg.n
    if code < 0 or code > cfg.mask:
        raise ValueError(f"code {code:#x} does not fit {n} bits")
    sign_bit = (code >> (n - 1)) & 1
    run_digit = 1 - sign_bit  # flipped sign bit is the first run digit
    m = 1
    pos = n - 2
    while m < cfg.is_max and pos >= 0 and ((code >> pos) & 1) == run_digit:
        m += 1
        pos -= 1
    # A terminator bit is consumed only when the run stopped short of IS.
    term = 1 if m < cfg.is_max else 0
    fs = n - m - term
    f = code & ((1 << fs) - 1)
    int_value = (m - 1) if run_digit == 1 else -m
    return UnpackedTfx(
        sign=-1 if sign_bit else 1,
        int_value=int_value,
        frac_numerator=f,
        frac_bits=fs,
        run_length=m,
    )


def pack(u: UnpackedTfx, cfg: TfxConfig) -> int:
    """Encode decoded fields back into an n-bit pattern (inverse of unpack)."""
    n = cfg.n
    if u.int_value >= 0:
        run_digit, sign_bit, m = 1, 0, u.int_value + 1
    else:
        run_digit, sign_bit, m = 0, 1, -u.int_value
    if not 1 <= m <= cfg.is_max:
        raise ValueError(f"integer value {u.int_value} needs run {m} > IS={cfg.is_max}")
    if m != u.run_length:
        raise ValueError(f"run_length {u.run_length} inconsistent with I={u.int_value}")
    term = 1 if m < cfg.is_max else 0
    fs = n - m - term
    if fs != u.frac_bits:
        raise ValueError(f"frac_bits {u.frac_bits} inconsistent, expected {fs}")
    if not 0 <= u.frac_numerator < (1 << fs):
        raise ValueError(f"fraction {u.frac_numerator} does not fit {fs} bits")
    code = sign_bit << (n - 1)
    for k in range(m - 1):  # run continuation after the (virtual) sign digit
        code |= run_digit << (n - 2 - k)
    if term:
        code |= (1 - run_digit) << fs  # terminator sits just above the fraction
    return code | u.frac_numerator


def to_real(u: UnpackedTfx, cfg: TfxConfig) -> Fraction:
    """Exact value (I + f/2^fs) * 2^SC of a decoded TFX number."""
    return (u.int_value + Fraction(u.frac_numerator, 1 << u.frac_bits)) * _pow2(cfg.sc)


def decode(code: int, cfg: FormatConfig) -> Fraction:
    """Exact value of an unsigned n-bit code in either format."""
    if isinstance(cfg, TfxConfig):
        return to_real(unpack(code, cfg), cfg)
    if code < 0 or code > cfg.mask:
        raise ValueError(f"code {code:#x} does not fit {cfg.n} bits")
    return Fraction(signed_code(code, cfg.n), 1 << cfg.frac_bits)


def signed_code(code: int, n: int) -> int:
    """Two's-complement reading of an unsigned n-bit pattern."""
    return code - (1 << n) if code & (1 << (n - 1)) else code


def unsigned_code(scode: int, n: int) -> int:
    """Unsigned n-bit pattern of a signed code."""
    return scode & ((1 << n) - 1)


def _pow2(e: int) -> Fraction:
    return Fraction(1 << e, 1) if e >= 0 else Fraction(1, 1 << -e)


# ── Extremes and enumeration ─────────────────────────────────────


def extremes(cfg: FormatConfig) -> FormatExtremes:
    """Exact max/min representable values (the quantizer's clip bounds)."""
    if isinstance(cfg, FxpConfig):
        denom = 1 << cfg.frac_bits
        half = 1 << (cfg.n - 1)
        return FormatExtremes(
            max_pos=Fraction(half - 1, denom),
            min_neg=Fraction(-half, denom),
            min_pos=Fraction(1, denom),
        )
    scale = _pow2(cfg.sc)
    fs_sat = cfg.n - cfg.is_max  # fraction width once the run saturates
    max_pos = (cfg.is_max - 1 + Fraction((1 << fs_sat) - 1, 1 << fs_sat)) * scale
    min_neg = -cfg.is_max * scale
    min_pos_exp = cfg.n - 1 if cfg.is_max == 1 else cfg.n - 2
    min_pos = Fraction(1, 1 << min_pos_exp) * scale
    return FormatExtremes(max_pos=max_pos, min_neg=min_neg, min_pos=min_pos)


def dynamic_range(cfg: FormatConfig) -> tuple[Fraction, Fraction]:
    """(|largest|, smallest positive) magnitude pair, scale-independent.

    For TFX this is the pair at SC = 0, i.e. (IS, 2^-(n-2)) for IS >= 2 and
    (1, 2^-(n-1)) for IS = 1; scaling multiplies both entries equally, so
    the ratio never depends on SC.
    """
    if isinstance(cfg, TfxConfig) and cfg.sc != 0:
        cfg = TfxConfig(cfg.n, cfg.is_max, 0)
    ext = extremes(cfg)
    return (max(abs(ext.min_neg), ext.max_pos), ext.min_pos)


def enumerate_values(cfg: FormatConfig) -> list[tuple[int, Fraction]]:
    """All 2^n (code, exact value) pairs, sorted ascending by value."""
    pairs = [(code, decode(code, cfg)) for code in range(1 << cfg.n)]
    pairs.sort(key=lambda cv: cv[1])
    return pairs


# ── Quantization ─────────────────────────────────────────────────

# Rounding is nearest-value with ties to the candidate whose *code* has a
# zero least-significant bit; on the uniform lattices (FXP and IS = 1) this
# is exactly round-to-nearest-even.


class _Table:
    """Per-config lookup tables shared by the scalar and array quantizers."""

    def __init__(self, cfg: FormatConfig) -> None:
        pairs = enumerate_values(cfg)
        self.values = [v for _, v in pairs]  # exact, ascending
        self.codes = [c for c, _ in pairs]
        self.values_f64 = np.array([float(v) for v in self.values])
        # Midpoint k separates values k and k+1; dyadic, so exact in float64.
        self.mids_f64 = (self.values_f64[:-1] + self.values_f64[1:]) / 2.0
        self.scodes = np.array(
            [signed_code(c, cfg.n) for c in self.codes], dtype=np.int32
        )
        self.lsb = np.array([c & 1 for c in self.codes], dtype=bool)


@lru_cache(maxsize=None)
def _table(cfg: FormatConfig) -> _Table:
    return _Table(cfg)


def quantize_real(x: float | int | Fraction, cfg: FormatConfig) -> int:
    """Round a finite real to the nearest representable code, exactly.

    Values at or beyond the format extremes clip; +/-inf clips too; NaN is
    rejected.  Ties go to the candidate code with a zero LSB.
    """
    tab = _table(cfg)
    if isinstance(x, float):
        if math.isnan(x):
            raise ValueError("cannot quantize NaN")
        if math.isinf(x):
            return tab.codes[-1] if x > 0 else tab.codes[0]
        x = Fraction(x)
    else:
        x = Fraction(x)
    values = tab.values
    if x <= values[0]:
        return tab.codes[0]
    if x >= values[-1]:
        return tab.codes[-1]
    lo, hi = 0, len(values) - 1
    while hi - lo > 1:  # invariant: values[lo] <= x <= values[hi]
        mid = (lo + hi) // 2
        if values[mid] <= x:
            lo = mid
        else:
            hi = mid
    d_lo = x - values[lo]
    d_hi = values[hi] - x
    if d_lo < d_hi:
        return tab.codes[lo]
    if d_hi < d_lo:
        return tab.codes[hi]
    return tab.codes[lo] if tab.codes[lo] & 1 == 0 else tab.codes[hi]


def value_table(cfg: FormatConfig) -> np.ndarray:
    """float64 value of every code, indexed by signed code + 2^(n-1)."""
    tab = _table(cfg)
    out = np.empty(1 << cfg.n)
    out[tab.scodes + (1 << (cfg.n - 1))] = tab.values_f64
    return out


def quantize_array(x: np.ndarray, cfg: FormatConfig) -> np.ndarray:
    """Vectorized quantize_real over a float array; returns signed codes.

    Exact: every lattice value and midpoint is a small dyadic rational, so
    float64 comparisons decide each rounding without error.
    """
    tab = _table(cfg)
    arr = np.asarray(x, dtype=np.float64)
    shape = arr.shape
    flat = arr.reshape(-1)
    if np.isnan(flat).any():
        raise ValueError("cannot quantize NaN")
    flat = np.clip(flat, tab.values_f64[0], tab.values_f64[-1])
    idx = np.searchsorted(tab.mids_f64, flat, side="left")
    # On an exact midpoint take the neighbor whose code LSB is zero.
    n_mids = len(tab.mids_f64)
    at_mid = (idx < n_mids) & (flat == tab.mids_f64[np.minimum(idx, n_mids - 1)])
    if at_mid.any():
        odd = tab.lsb[idx[at_mid]]
        idx = idx.copy()
        idx[at_mid] += odd.astype(idx.dtype)
    return tab.scodes[idx].reshape(shape)


def decode_array(scodes: np.ndarray, cfg: FormatConfig) -> np.ndarray:
    """float64 values of an array of signed codes."""
    table = value_table(cfg)
    return table[np.asarray(scodes, dtype=np.int64) + (1 << (cfg.n - 1))]


class IntegerLattice:
    """The format's value set as integers on a common power-of-two grid.

    ``numerators[k] / 2^grid_exp`` is the k-th smallest representable value;
    ``boundaries2[k]`` is twice the midpoint between values k and k+1 on the
    same grid.  Integer comparisons against these decide any rounding
    exactly, which is what the vectorized inference path relies on.
    """

    def __init__(self, cfg: FormatConfig) -> None:
        tab = _table(cfg)
        self.grid_exp = max(v.denominator.bit_length() - 1 for v in tab.values)
        nums = [int(v * (1 << self.grid_exp)) for v in tab.values]
        self.numerators = np.array(nums, dtype=np.int64)
        self.boundaries2 = self.numerators[:-1] + self.numerators[1:]
        self.scodes = tab.scodes
        self.lsb = tab.lsb
        self.max_abs_numerator = int(np.abs(self.numerators).max())


@lru_cache(maxsize=None)
def integer_lattice(cfg: FormatConfig) -> IntegerLattice:
    return IntegerLattice(cfg)


# ── Descriptor parsing ───────────────────────────────────────────


def parse_format(text: str) -> FormatConfig:
    """Parse ``tfx:n/IS/SC`` or ``fxp:n/frac`` into a config."""
    kind, sep, rest = text.strip().partition(":")
    if not sep:
        raise FormatParseError(f"missing ':' in format descriptor {text!r}")
    parts = rest.split("/")
    try:
        if kind == "tfx":
            if len(parts) != 3:
                raise FormatParseError(f"tfx descriptor needs n/IS/SC, got {text!r}")
            return TfxConfig(int(parts[0]), int(parts[1]), int(parts[2]))
        if kind == "fxp":
            if len(parts) != 2:
                raise FormatParseError(f"fxp descriptor needs n/frac, got {text!r}")
            return FxpConfig(int(parts[0]), int(parts[1]))
    except ValueError as exc:
        raise FormatParseError(f"bad format descriptor {text!r}: {exc}") from exc
    raise FormatParseError(f"unknown format kind {kind!r} in {text!r}")
