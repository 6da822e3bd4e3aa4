"""Parametric minifloat formats: bit-exact encode/decode and rounding.

Codes are unsigned integer arrays (``uint8`` for FP8, ``uint16`` for FP16,
``uint32`` for FP32) laid out sign | exponent | mantissa from high to low
bits. The all-ones exponent field is reserved for Inf/NaN and subnormals
are fully supported.

All rounding decisions are made in float64, which holds every FP32 input
exactly and leaves enough headroom below the FP32 subnormal range that the
scaled significand and its fractional residual are computed without error.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from decimal import ROUND_DOWN, Decimal
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from fp8train.lfsr import RngStream

__all__ = [
    "FloatFormat",
    "FP8",
    "FP16",
    "FP32",
    "RoundingMode",
    "DynamicRange",
    "EncodeResult",
    "encode",
    "decode",
    "quantize_values",
    "round_nearest_even",
    "stochastic_round",
    "truncate",
    "ulp",
    "dynamic_range",
    "all_codes",
    "format_sci",
    "range_report",
]


@dataclass(frozen=True)
class FloatFormat:
    """Sign/exponent/mantissa layout of a binary floating-point format."""

    name: str
    exponent_bits: int
    mantissa_bits: int

    def __post_init__(self) -> None:
        if self.width not in (8, 16, 32):
            raise ValueError(f"unsupported total width {self.width}")

    @property
    def sign_bits(self) -> int:
        return 1

    @property
    def width(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def bias(self) -> int:
        return (1 << (self.exponent_bits - 1)) - 1

    @property
    def emin(self) -> int:
        return 1 - self.bias

    @property
    def emax(self) -> int:
        # field 2^e - 1 is reserved for Inf/NaN
        return (1 << self.exponent_bits) - 2 - self.bias

    @property
    def max_normal(self) -> float:
        return math.ldexp(2.0 - 2.0 ** -self.mantissa_bits, self.emax)

    @property
    def min_normal(self) -> float:
        return math.ldexp(1.0, self.emin)

    @property
    def min_subnormal(self) -> float:
        return math.ldexp(1.0, self.emin - self.mantissa_bits)

    @property
    def code_dtype(self) -> type:
        return {8: np.uint8, 16: np.uint16, 32: np.uint32}[self.width]

    @property
    def exp_mask(self) -> int:
        return (1 << self.exponent_bits) - 1

    @property
    def man_mask(self) -> int:
        return (1 << self.mantissa_bits) - 1

    def __str__(self) -> str:
        return self.name


FP8 = FloatFormat("FP8", 5, 2)
FP16 = FloatFormat("FP16", 5, 10)
FP32 = FloatFormat("FP32", 8, 23)


class RoundingMode(enum.Enum):
    NEAREST_EVEN = "rne"
    STOCHASTIC = "stochastic"
    # oracle building block only; not offered for training
    TRUNCATE = "truncate"

    @classmethod
    def parse(cls, text: str | "RoundingMode") -> "RoundingMode":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower()
        aliases = {"nearest": "rne", "nearest_even": "rne", "sr": "stochastic", "rtz": "truncate"}
        key = aliases.get(key, key)
        for m in cls:
            if m.value == key:
                return m
        raise ValueError(f"unknown rounding mode {text!r}")


class DynamicRange(NamedTuple):
    max_normal: float
    min_normal: float
    min_subnormal: float


class EncodeResult(NamedTuple):
    codes: np.ndarray
    overflowed: np.ndarray
    underflowed: np.ndarray


_F64_EXP = np.uint64(0x7FF0000000000000)


def _quantum(a: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Spacing of representable magnitudes at ``a >= 0`` (subnormal step below min_normal)."""
    _, e = np.frexp(a)
    exp = np.where(a > 0, e - 1, fmt.emin)
    exp = np.maximum(exp, fmt.emin)
    return np.ldexp(1.0, exp - fmt.mantissa_bits)


def _round_magnitude(
    a: np.ndarray, fmt: FloatFormat, mode: RoundingMode, r: np.ndarray | None
) -> np.ndarray:
    q = _quantum(a, fmt)
    scaled = a / q  # exact: q is a power of two
    if mode is RoundingMode.NEAREST_EVEN:
        n = np.rint(scaled)  # ties to even
    elif mode is RoundingMode.TRUNCATE:
        n = np.floor(scaled)
    else:
        fl = np.floor(scaled)
        frac = scaled - fl
        # up iff frac + r >= 1; 1 - r is exact for r with few bits
        n = fl + (frac >= 1.0 - r)
    return n * q


def encode(
    x,
    fmt: FloatFormat = FP8,
    mode: RoundingMode = RoundingMode.NEAREST_EVEN,
    rng: RngStream | None = None,
    saturate: bool = False,
    r: np.ndarray | None = None,
) -> EncodeResult:
    """Round ``x`` into ``fmt`` and return codes plus overflow/underflow flags.

    ``|x| > max_normal`` yields a signed Inf code (or the signed max normal
    when ``saturate``) and sets ``overflowed``. A nonzero input whose rounded
    magnitude is zero sets ``underflowed``. NaN maps to a quiet NaN code.

    Stochastic mode draws one fraction per element from ``rng`` in C order;
    callers that manage their own draws may pass them as ``r`` instead.
    """
    mode = RoundingMode.parse(mode)
    x = np.asarray(x, dtype=np.float64)
    if mode is RoundingMode.STOCHASTIC:
        if r is None:
            if rng is None:
                raise ValueError("stochastic rounding needs an RngStream")
            r = rng.uniform(x.size).reshape(x.shape)
        else:
            r = np.broadcast_to(np.asarray(r, dtype=np.float64), x.shape)
    elif rng is not None or r is not None:
        raise ValueError(f"{mode.name} rounding takes no random stream")

    sign = np.signbit(x)
    a = np.abs(x)
    nan = np.isnan(x)
    over = ~nan & (a > fmt.max_normal)
    finite = ~nan & ~over
    a_fin = np.where(finite, a, 0.0)
    v = _round_magnitude(a_fin, fmt, mode, r)

    sub = v < fmt.min_normal
    _, e = np.frexp(v)
    exp_field = np.where(sub, 0, e - 1 + fmt.bias)
    unit = np.ldexp(1.0, np.where(sub, fmt.emin, e - 1) - fmt.mantissa_bits)
    mant = v / unit
    mant = np.where(sub, mant, mant - (1 << fmt.mantissa_bits))

    exp_field = exp_field.astype(np.int64)
    mant = mant.astype(np.int64)
    if saturate:
        exp_field = np.where(over, fmt.exp_mask - 1, exp_field)
        mant = np.where(over, fmt.man_mask, mant)
    else:
        exp_field = np.where(over, fmt.exp_mask, exp_field)
        mant = np.where(over, 0, mant)
    exp_field = np.where(nan, fmt.exp_mask, exp_field)
    mant = np.where(nan, _nan_payload(x, fmt), mant)

    w = fmt.width
    bits = (sign.astype(np.int64) << (w - 1)) | (exp_field << fmt.mantissa_bits) | mant
    codes = bits.astype(fmt.code_dtype)
    underflowed = finite & (a > 0) & (v == 0)
    return EncodeResult(codes, over, underflowed)


def _nan_payload(x: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Top mantissa bits of each float64 NaN; the quiet pattern if they are all zero."""
    bits = np.ascontiguousarray(x).view(np.uint64).reshape(x.shape)
    pay = ((bits >> np.uint64(52 - fmt.mantissa_bits)) & np.uint64(fmt.man_mask)).astype(np.int64)
    return np.where(pay == 0, 1 << (fmt.mantissa_bits - 1), pay)


def decode(codes, fmt: FloatFormat = FP8) -> np.ndarray:
    """Closed-form value of each code as float64 (signed zeros, Inf, NaN kept).

    Formats up to 16 bits go through a cached table built from the same formula.
    """
    c = np.asarray(codes).astype(np.int64)
    if c.size and (c.min() < 0 or c.max() >= (1 << fmt.width)):
        raise ValueError(f"code out of range for {fmt.name}")
    if fmt.width <= 16:
        return _decode_table(fmt)[c]
    return _decode_formula(c, fmt)


@lru_cache(maxsize=None)
def _decode_table(fmt: FloatFormat) -> np.ndarray:
    table = _decode_formula(np.arange(1 << fmt.width, dtype=np.int64), fmt)
    table.flags.writeable = False
    return table


def _decode_formula(c: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    m = fmt.mantissa_bits
    s = (c >> (fmt.width - 1)) & 1
    e = (c >> m) & fmt.exp_mask
    f = c & fmt.man_mask
    normal = np.ldexp(1.0 + f / float(1 << m), e - fmt.bias)
    subnormal = np.ldexp(f.astype(np.float64), fmt.emin - m)
    v = np.where(e == 0, subnormal, normal)
    # NaN payload goes to the top of the float64 mantissa so encode can restore it
    nan = (_F64_EXP | (f.astype(np.uint64) << np.uint64(52 - m))).view(np.float64)
    special = np.where(f == 0, np.inf, nan)
    v = np.where(e == fmt.exp_mask, special, v)
    return np.copysign(v, np.where(s == 1, -1.0, 1.0))


def quantize_values(
    x,
    fmt: FloatFormat = FP8,
    mode: RoundingMode = RoundingMode.NEAREST_EVEN,
    rng: RngStream | None = None,
    saturate: bool = False,
) -> np.ndarray:
    """Round-trip ``x`` through ``fmt``: ``decode(encode(x))``."""
    return decode(encode(x, fmt, mode, rng, saturate).codes, fmt)


def round_nearest_even(x, fmt: FloatFormat = FP8) -> np.ndarray:
    return quantize_values(x, fmt, RoundingMode.NEAREST_EVEN)


def stochastic_round(x, fmt: FloatFormat, rng: RngStream) -> np.ndarray:
    """Round up by one quantum with probability residual/quantum, else truncate."""
    return quantize_values(x, fmt, RoundingMode.STOCHASTIC, rng)


def truncate(x, fmt: FloatFormat = FP8) -> np.ndarray:
    return quantize_values(x, fmt, RoundingMode.TRUNCATE)


def ulp(x, fmt: FloatFormat = FP8) -> np.ndarray:
    """Gap between adjacent representable magnitudes at ``|x|``.

    >>> float(ulp(1.0)), float(ulp(0.0)) == 2.0**-16
    (0.25, True)
    """
    return _quantum(np.abs(np.asarray(x, dtype=np.float64)), fmt)


def dynamic_range(fmt: FloatFormat) -> DynamicRange:
    return DynamicRange(fmt.max_normal, fmt.min_normal, fmt.min_subnormal)


def all_codes(fmt: FloatFormat = FP8) -> np.ndarray:
    if fmt.width > 16:
        raise ValueError("exhaustive code table only for 8/16-bit formats")
    return np.arange(1 << fmt.width, dtype=np.int64).astype(fmt.code_dtype)


def format_sci(value: float, digits: int = 3) -> str:
    """Scientific notation truncated (not rounded) to ``digits`` significant digits.

    >>> format_sci(2.0**-16), format_sci(3.4028234663852886e38)
    ('1.52e-5', '3.40e+38')
    """
    d = Decimal(value)
    exp = d.adjusted()
    mant = (d.scaleb(-exp)).quantize(Decimal(1).scaleb(1 - digits), rounding=ROUND_DOWN)
    return f"{mant}e{exp:+d}"


def _format_range_value(v: float) -> str:
    if v >= 1 and v == int(v) and v < 1e6:
        return str(int(v))
    return format_sci(v)


_IEEE_NAMES = {"FP32": "IEEE-754 float", "FP16": "IEEE-754 half-float", "FP8": "FP8 (1,5,2)"}


def range_report(formats=(FP32, FP16, FP8)) -> str:
    """Plain-text dynamic-range table, one row per format."""
    header = ("Data Type", "Bit Format (s, e, m)", "Max Normal", "Min Normal", "Min Subnormal")
    rows = [header]
    for fmt in formats:
        dr = dynamic_range(fmt)
        rows.append(
            (
                _IEEE_NAMES.get(fmt.name, fmt.name),
                f"{fmt.sign_bits}, {fmt.exponent_bits}, {fmt.mantissa_bits}",
                _format_range_value(dr.max_normal),
                format_sci(dr.min_normal),
                format_sci(dr.min_subnormal),
            )
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    if FP16 in formats:
        lines.append("")
        lines.append("note: binary16 max normal is (2 - 2^-10) * 2^15 = 65504, not 65535.")
    return "\n".join(lines) + "\n"
