"""Bit-exact codecs for the storable weight formats.

Raw words are plain non-negative ints. Bit positions count from the least
significant bit (bit 0), so the sign bit of a float format is bit_width - 1.
Float formats decode to exact float64 values (every BF16/FP16/FP32 value is
representable in float64); encoding rounds to nearest, ties to even. INT8 is
two's complement. Decoding never raises on special patterns: the all-ones
exponent yields +/-inf or nan per IEEE-754, and subnormals decode faithfully.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class FormatSpec:
    """Field layout of a storage format; exponent_bits == 0 means integer."""

    name: str
    bit_width: int
    exponent_bits: int
    mantissa_bits: int

    @property
    def is_float(self) -> bool:
        return self.exponent_bits > 0

    @property
    def sign_bit(self) -> int:
        return self.bit_width - 1

    @property
    def exponent_bias(self) -> int:
        return (1 << (self.exponent_bits - 1)) - 1

    @property
    def raw_mask(self) -> int:
        return (1 << self.bit_width) - 1


BF16 = FormatSpec("BF16", 16, 8, 7)
FP16 = FormatSpec("FP16", 16, 5, 10)
FP32 = FormatSpec("FP32", 32, 8, 23)
INT8 = FormatSpec("INT8", 8, 0, 0)

FORMATS: dict[str, FormatSpec] = {f.name: f for f in (BF16, FP16, FP32, INT8)}


def get_format(name: str) -> FormatSpec:
    try:
        return FORMATS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown storage format {name!r}") from None


def _check_raw(raw: int, fmt: FormatSpec) -> None:
    if not isinstance(raw, (int, np.integer)):
        raise TypeError(f"raw word must be an int, got {type(raw).__name__}")
    if raw < 0 or raw > fmt.raw_mask:
        raise ValueError(f"raw word {raw:#x} out of range for {fmt.name}")


def decode(raw: int, fmt: FormatSpec) -> float:
    """Exact value of a raw word, in float64."""
    _check_raw(raw, fmt)
    raw = int(raw)
    if not fmt.is_float:
        half = 1 << (fmt.bit_width - 1)
        return float(raw - (half << 1)) if raw >= half else float(raw)
    m_bits = fmt.mantissa_bits
    mant = raw & ((1 << m_bits) - 1)
    expf = (raw >> m_bits) & ((1 << fmt.exponent_bits) - 1)
    sign = -1.0 if raw >> fmt.sign_bit else 1.0
    if expf == (1 << fmt.exponent_bits) - 1:
        return sign * math.inf if mant == 0 else math.nan
    if expf == 0:
        return sign * math.ldexp(mant, 1 - fmt.exponent_bias - m_bits)
    return sign * math.ldexp((1 << m_bits) + mant, expf - fmt.exponent_bias - m_bits)


def encode(value: float, fmt: FormatSpec) -> int:
    """Raw word for a value: round-to-nearest-even for floats, exact for INT8.

    The float codecs are total: infinities map to the infinity pattern
    (finite values beyond the largest magnitude overflow there too, as
    round-to-nearest prescribes) and NaN maps to the canonical quiet NaN.
    INT8 rejects non-finite, non-integral, and out-of-range inputs.
    """
    if not fmt.is_float:
        if not math.isfinite(value):
            raise ValueError(f"cannot encode non-finite value {value!r} as {fmt.name}")
        iv = int(value)
        if iv != value:
            raise ValueError(f"{fmt.name} requires an integral value, got {value!r}")
        half = 1 << (fmt.bit_width - 1)
        if iv < -half or iv > half - 1:
            raise ValueError(f"{iv} out of range for {fmt.name}")
        return iv & fmt.raw_mask
    v = float(value)
    if math.isnan(v):
        exp_all_ones = ((1 << fmt.exponent_bits) - 1) << fmt.mantissa_bits
        return exp_all_ones | (1 << (fmt.mantissa_bits - 1))
    if math.isinf(v):
        sign = 1 if v < 0 else 0
        exp_all_ones = ((1 << fmt.exponent_bits) - 1) << fmt.mantissa_bits
        return (sign << fmt.sign_bit) | exp_all_ones
    sign = 1 if math.copysign(1.0, v) < 0 else 0
    x = abs(v)
    m_bits, bias = fmt.mantissa_bits, fmt.exponent_bias
    if x == 0.0:
        return sign << fmt.sign_bit
    e = math.frexp(x)[1] - 1
    if e < 1 - bias:
        # Below the normal range: quantum is 2**(1 - bias - m_bits).
        q = _round_half_even(math.ldexp(x, m_bits + bias - 1))
        if q == 0:
            return sign << fmt.sign_bit
        if q < (1 << m_bits):
            return (sign << fmt.sign_bit) | q
        e = 1 - bias
        q = 1 << m_bits
    else:
        q = _round_half_even(math.ldexp(x, m_bits - e))
        if q == (1 << (m_bits + 1)):
            q >>= 1
            e += 1
    biased = e + bias
    if biased > (1 << fmt.exponent_bits) - 2:
        expf = (1 << fmt.exponent_bits) - 1
        return (sign << fmt.sign_bit) | (expf << m_bits)
    return (sign << fmt.sign_bit) | (biased << m_bits) | (q - (1 << m_bits))


def _round_half_even(x: float) -> int:
    # Scaling by a power of two is exact in float64 here, so round() applies
    # ties-to-even to the true quotient.
    return round(x)


def decode_array(raw: np.ndarray, fmt: FormatSpec) -> np.ndarray:
    """Vectorized decode of a raw-word array into float64."""
    raw = np.asarray(raw)
    # NaN payload words are legitimate inputs; their widening casts warn.
    with np.errstate(invalid="ignore"):
        if fmt.name == "BF16":
            return (raw.astype(np.uint32) << 16).view(np.float32).astype(np.float64)
        if fmt.name == "FP16":
            return raw.astype(np.uint16).view(np.float16).astype(np.float64)
        if fmt.name == "FP32":
            return raw.astype(np.uint32).view(np.float32).astype(np.float64)
        if fmt.name == "INT8":
            return raw.astype(np.uint8).view(np.int8).astype(np.float64)
    raise ValueError(f"unknown storage format {fmt.name!r}")


def encode_array(values: np.ndarray, fmt: FormatSpec) -> np.ndarray:
    """Vectorized encode into raw words; same rounding as the scalar encode."""
    v = np.asarray(values, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        if fmt.name == "FP16":
            with np.errstate(over="ignore"):
                words = v.astype(np.float16).view(np.uint16)
            return _canonicalize_nan(v, words, FP16)
        if fmt.name == "FP32":
            with np.errstate(over="ignore"):
                words = v.astype(np.float32).view(np.uint32)
            return _canonicalize_nan(v, words, FP32)
    if fmt.name == "INT8":
        if not np.isfinite(v).all():
            raise ValueError("cannot encode non-finite values as INT8")
        if not (v == np.trunc(v)).all():
            raise ValueError("INT8 requires integral values")
        if v.min(initial=0) < -128 or v.max(initial=0) > 127:
            raise ValueError("value out of range for INT8")
        return v.astype(np.int8).view(np.uint8)
    if fmt.name != "BF16":
        raise ValueError(f"unknown storage format {fmt.name!r}")
    with np.errstate(over="ignore", invalid="ignore"):
        f32 = v.astype(np.float32)
    u = np.atleast_1d(f32).view(np.uint32).copy()
    rounded = ((u + 0x7FFF + ((u >> 16) & 1)) >> 16).astype(np.uint16)
    # Rounding float64 -> float32 -> BF16 double-rounds exactly when the
    # float32 image lands on a BF16 midpoint; resolve those against the
    # original float64 value.
    ties = (u & 0xFFFF) == 0x8000
    if ties.any():
        orig_mag = np.abs(np.atleast_1d(v)[ties])
        mid_mag = np.abs(np.atleast_1d(f32)[ties]).astype(np.float64)
        down = (u[ties] >> 16).astype(np.uint16)
        up = down + np.uint16(1)
        even = np.where(down & 1, up, down)
        fixed = np.where(orig_mag > mid_mag, up, np.where(orig_mag < mid_mag, down, even))
        rounded[ties] = fixed
    nonfinite = ~np.isfinite(np.atleast_1d(v))
    if nonfinite.any():
        signs = (np.signbit(np.atleast_1d(v)[nonfinite])).astype(np.uint16) << 15
        special = signs | np.uint16(0x7F80)
        nans = np.isnan(np.atleast_1d(v)[nonfinite])
        special = np.where(nans, np.uint16(0x7F80 | 0x40), special)
        rounded[nonfinite] = special
    return rounded.reshape(np.shape(v)) if np.ndim(v) else rounded[0]


def _canonicalize_nan(values: np.ndarray, words: np.ndarray, fmt: FormatSpec):
    """Force NaN encodings to the canonical quiet pattern, matching encode."""
    nans = np.isnan(np.atleast_1d(values))
    if not nans.any():
        return words
    canonical = (((1 << fmt.exponent_bits) - 1) << fmt.mantissa_bits) | (
        1 << (fmt.mantissa_bits - 1)
    )
    flat = np.atleast_1d(words).copy()
    flat[nans] = canonical
    return flat.reshape(np.shape(words)) if np.ndim(words) else flat[0]


@lru_cache(maxsize=None)
def _decode_table(fmt_name: str) -> np.ndarray:
    fmt = FORMATS[fmt_name]
    return decode_array(np.arange(1 << fmt.bit_width, dtype=np.uint32), fmt)


def decode_fast(raw: int, fmt: FormatSpec) -> float:
    """Table-backed decode for narrow formats; falls back to exact decode."""
    if fmt.bit_width <= 16:
        return float(_decode_table(fmt.name)[raw])
    return decode(raw, fmt)


@dataclass(frozen=True)
class BitWord:
    """A raw storage word tagged with its format."""

    raw: int
    fmt: FormatSpec

    def __post_init__(self) -> None:
        _check_raw(self.raw, self.fmt)

    @property
    def value(self) -> float:
        return decode(self.raw, self.fmt)

    def flip(self, bit_position: int) -> "BitWord":
        if not 0 <= bit_position < self.fmt.bit_width:
            raise ValueError(f"bit {bit_position} out of range for {self.fmt.name}")
        return BitWord(self.raw ^ (1 << bit_position), self.fmt)


@dataclass(frozen=True)
class FlipOutcome:
    """Result of flipping one bit of a word: position, new word, value change."""

    bit_position: int
    new_raw: int
    new_value: float
    delta: float
    finite: bool


def enumerate_flips(raw: int, fmt: FormatSpec) -> tuple[FlipOutcome, ...]:
    """All bit_width single-bit flips of a word, in bit order from bit 0."""
    _check_raw(raw, fmt)
    raw = int(raw)
    old = decode_fast(raw, fmt)
    outcomes = []
    for bit in range(fmt.bit_width):
        new_raw = raw ^ (1 << bit)
        new_value = decode_fast(new_raw, fmt)
        outcomes.append(
            FlipOutcome(bit, new_raw, new_value, new_value - old, math.isfinite(new_value))
        )
    return tuple(outcomes)
