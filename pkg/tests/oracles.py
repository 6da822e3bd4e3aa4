"""Reference implementations the tests compare against.

Everything here is written from the format definition alone and shares no
code with the package: exact rationals for the code table, a sorted-table
nearest search for rounding, and scalar loops for the kernels.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

EXP_BITS, MAN_BITS, BIAS = 5, 2, 15
FP8_MAX = 57344.0


def fp8_value(code: int) -> float:
    """Value of one FP8 (1,5,2) code from its bit fields, via exact rationals."""
    s = (code >> 7) & 1
    e = (code >> 2) & 0x1F
    f = code & 0x3
    if e == 0x1F:
        v = float("inf") if f == 0 else float("nan")
    elif e == 0:
        v = float(Fraction(f, 4) * Fraction(2) ** (1 - BIAS))
    else:
        v = float((1 + Fraction(f, 4)) * Fraction(2) ** (e - BIAS))
    return -v if s else v


FP8_TABLE = np.array([fp8_value(c) for c in range(256)])
# finite non-negative magnitudes; index equals code for codes 0..123
_POS = FP8_TABLE[:124]


def rne_oracle(x) -> np.ndarray:
    """Nearest FP8 code to each element, ties to the even mantissa.

    Magnitudes above the max normal become Inf, NaN becomes the quiet NaN
    code 0x7E, and the sign bit follows the input (so tiny negatives give
    -0).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    out = np.empty(x.size, dtype=np.int64)
    a = np.abs(x)
    hi = np.clip(np.searchsorted(_POS, a, side="left"), 0, len(_POS) - 1)
    lo = np.clip(hi - 1, 0, None)
    d_lo = a - _POS[lo]
    d_hi = _POS[hi] - a
    pick = np.where(d_lo < d_hi, lo, hi)
    tie = d_lo == d_hi
    pick = np.where(tie & (lo % 2 == 0), lo, pick)
    pick = np.where(tie & (lo % 2 == 1), hi, pick)
    pick = np.where(a <= _POS[0], 0, pick)
    out[:] = pick
    out[a > FP8_MAX] = 0x7C
    out[np.isnan(x)] = 0x7E
    out |= np.signbit(x).astype(np.int64) << 7
    return out.astype(np.uint8)


def fp8_ulp(x: float) -> float:
    """Spacing of FP8 values at ``|x|`` (the subnormal step below 2^-14)."""
    a = abs(x)
    if a < 2.0**-14:
        return 2.0**-16
    e = int(np.floor(np.log2(a)))
    if 2.0**e > a:
        e -= 1
    elif 2.0 ** (e + 1) <= a:
        e += 1
    return 2.0 ** (e - MAN_BITS)


def matmul_scalar(a, b) -> np.ndarray:
    """Triple loop, float32 scalars, reduction index ascending from +0."""
    a = np.asarray(a, np.float32)
    b = np.asarray(b, np.float32)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), np.float32)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(m):
            for j in range(n):
                acc = np.float32(0.0)
                for t in range(k):
                    acc = np.float32(acc + np.float32(a[i, t] * b[t, j]))
                out[i, j] = acc
    return out


def conv_scalar(x, w, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct convolution, one float32 scalar accumulator per output, (c, i, j) ascending."""
    x = np.asarray(x, np.float32)
    w = np.asarray(w, np.float32)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), np.float32)
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    out = np.zeros((n, f, oh, ow), np.float32)
    for b in range(n):
        for o in range(f):
            for y in range(oh):
                for z in range(ow):
                    acc = np.float32(0.0)
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                p = np.float32(xp[b, ci, y * stride + i, z * stride + j] * w[o, ci, i, j])
                                acc = np.float32(acc + p)
                    out[b, o, y, z] = acc
    return out


def random_fp8_array(rng: np.random.Generator, shape, lo_exp: int = -6, hi_exp: int = 4) -> np.ndarray:
    """Random finite FP8 values (as float32) with magnitudes in ``[2^lo_exp, 2^hi_exp)``."""
    finite = np.array([v for v in FP8_TABLE if np.isfinite(v) and (v == 0 or 2.0**lo_exp <= abs(v) < 2.0**hi_exp)])
    return rng.choice(finite, size=shape).astype(np.float32)


def same_bits(a, b) -> bool:
    a = np.ascontiguousarray(a, np.float32)
    b = np.ascontiguousarray(b, np.float32)
    return a.shape == b.shape and np.array_equal(a.view(np.uint32), b.view(np.uint32))
