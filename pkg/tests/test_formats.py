from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fp8train.formats import (
    FP8,
    FP16,
    FP32,
    FloatFormat,
    RoundingMode,
    all_codes,
    decode,
    dynamic_range,
    encode,
    format_sci,
    quantize_values,
    range_report,
    round_nearest_even,
    stochastic_round,
    truncate,
    ulp,
)
from fp8train.lfsr import RngStream

from oracles import FP8_MAX, FP8_TABLE, fp8_ulp, rne_oracle

finite_f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)
in_range = st.floats(-FP8_MAX, FP8_MAX, width=32, allow_nan=False)


def test_layout_constants():
    assert (FP8.exponent_bits, FP8.mantissa_bits, FP8.bias) == (5, 2, 15)
    assert FP8.width == 8
    assert FP8.max_normal == 57344.0
    assert FP8.min_normal == 2.0**-14
    assert FP8.min_subnormal == 2.0**-16
    assert FP16.max_normal == 65504.0
    assert FP32.max_normal == float(np.finfo(np.float32).max)
    assert dynamic_range(FP8) == (57344.0, 2.0**-14, 2.0**-16)


def test_decode_matches_bit_formula_for_all_codes():
    got = decode(all_codes(FP8), FP8)
    assert np.array_equal(got, FP8_TABLE, equal_nan=True)
    assert np.array_equal(np.signbit(got), np.signbit(FP8_TABLE))


def test_decode_fp16_matches_numpy_half():
    codes = np.arange(1 << 16, dtype=np.uint16)
    ref = codes.view(np.float16).astype(np.float64)
    assert np.array_equal(decode(codes, FP16), ref, equal_nan=True)


def test_decode_rejects_out_of_range_codes():
    with pytest.raises(ValueError):
        decode([256], FP8)
    with pytest.raises(ValueError):
        decode([-1], FP8)


@pytest.mark.parametrize(
    "x, expected",
    [
        (1.1, 1.0),
        (1.125, 1.0),  # tie between 1.0 and 1.25, even mantissa wins
        (1.375, 1.5),  # tie between 1.25 and 1.5
        (0.0, 0.0),
        (57344.0, 57344.0),
        (-3.0, -3.0),
        (2.0**-17, 0.0),  # half the smallest subnormal, tie to zero
        (3 * 2.0**-18, 2.0**-16),
    ],
)
def test_rne_examples(x, expected):
    assert round_nearest_even(np.float32(x))[()] == expected


def test_overflow_goes_to_inf_and_is_flagged():
    res = encode(np.array([1e6, -1e6, 57345.0, 57344.0]), FP8)
    vals = decode(res.codes)
    assert vals[0] == np.inf and vals[1] == -np.inf and vals[2] == np.inf
    assert vals[3] == 57344.0
    assert res.overflowed.tolist() == [True, True, True, False]


def test_saturate_clamps_to_max_normal():
    res = encode(np.array([1e6, -1e6]), FP8, saturate=True)
    assert decode(res.codes).tolist() == [57344.0, -57344.0]
    assert res.overflowed.all()


def test_underflow_flag_only_for_nonzero_flushes():
    res = encode(np.array([0.0, 1e-7, -1e-7, 2.0**-16]), FP8)
    assert res.underflowed.tolist() == [False, True, True, False]
    assert np.signbit(decode(res.codes)[2])


@pytest.mark.parametrize("shape", [(), (1,), (2, 3), (0, 4)])
def test_encode_preserves_shape(shape):
    x = np.ones(shape, np.float32)
    res = encode(x, FP8)
    assert res.codes.shape == res.overflowed.shape == res.underflowed.shape == shape
    assert decode(res.codes).shape == shape


def test_nan_stays_nan():
    assert np.isnan(decode(encode(np.array([np.nan]), FP8).codes)[0])


def test_rne_matches_oracle_on_every_midpoint():
    # all midpoints between adjacent finite magnitudes, plus nudges either side
    pos = FP8_TABLE[:124]
    mids = (pos[:-1] + pos[1:]) / 2
    xs = np.concatenate([mids, np.nextafter(mids, 0), np.nextafter(mids, np.inf)])
    xs = np.concatenate([xs, -xs])
    assert np.array_equal(encode(xs, FP8).codes, rne_oracle(xs))


@settings(max_examples=300, deadline=None)
@given(finite_f32)
def test_rne_matches_oracle(x):
    assert encode(np.float32(x), FP8).codes[()] == rne_oracle(np.float32(x))[0]


@settings(max_examples=200, deadline=None)
@given(in_range)
def test_rne_idempotent(x):
    once = round_nearest_even(np.float32(x))
    assert np.array_equal(round_nearest_even(once), once)


@settings(max_examples=200, deadline=None)
@given(in_range, in_range)
def test_rne_monotone(x, y):
    lo, hi = min(x, y), max(x, y)
    assert round_nearest_even(lo)[()] <= round_nearest_even(hi)[()]


@settings(max_examples=200, deadline=None)
@given(in_range)
def test_rne_sign_symmetric(x):
    assert round_nearest_even(-x)[()] == -round_nearest_even(x)[()]


@settings(max_examples=300, deadline=None)
@given(in_range)
def test_rne_error_within_half_ulp(x):
    err = abs(round_nearest_even(x)[()] - x)
    assert err <= fp8_ulp(x) / 2


@settings(max_examples=200, deadline=None)
@given(in_range, st.integers(1, 0xFFFF))
def test_stochastic_lands_on_a_neighbour(x, seed):
    v = stochastic_round(np.float32(x), FP8, RngStream(seed))[()]
    down = truncate(np.float32(x))[()]
    assert abs(v) - abs(down) in (0.0, fp8_ulp(x))
    assert v == 0 or np.sign(v) == np.sign(x)


@pytest.mark.parametrize("mode", list(RoundingMode))
def test_every_code_round_trips_under_every_mode(mode):
    codes = all_codes(FP8)
    rng = RngStream(0xBEEF) if mode is RoundingMode.STOCHASTIC else None
    back = encode(decode(codes), FP8, mode, rng).codes
    assert np.array_equal(back, codes)  # including Inf and NaN payloads


def test_nan_payload_survives_fp16_round_trip():
    codes = np.arange(1 << 16, dtype=np.uint16)
    assert np.array_equal(encode(decode(codes, FP16), FP16).codes, codes)


def test_truncate_rounds_toward_zero():
    assert truncate(np.array([1.2, -1.2, 1.49]), FP8).tolist() == [1.0, -1.0, 1.25]


def test_stochastic_needs_a_stream():
    with pytest.raises(ValueError):
        encode(np.array([1.1]), FP8, RoundingMode.STOCHASTIC)
    with pytest.raises(ValueError):
        encode(np.array([1.1]), FP8, RoundingMode.NEAREST_EVEN, RngStream(1))


def test_stochastic_explicit_draws():
    # frac of 1.1 within [1, 1.25) is 0.4: up iff r >= 0.6
    x = np.full(4, 1.1)
    r = np.array([0.0, 0.59, 0.6, 0.99])
    v = decode(encode(x, FP8, RoundingMode.STOCHASTIC, r=r).codes)
    assert v.tolist() == [1.0, 1.0, 1.25, 1.25]


def test_ulp_examples():
    assert ulp(1.0) == 0.25
    assert ulp(1.99) == 0.25
    assert ulp(2.0) == 0.5
    assert ulp(0.0) == 2.0**-16
    assert ulp(2.0**-15) == 2.0**-16


def test_parse_rounding_mode_aliases():
    assert RoundingMode.parse("rne") is RoundingMode.NEAREST_EVEN
    assert RoundingMode.parse("stochastic") is RoundingMode.STOCHASTIC
    assert RoundingMode.parse(RoundingMode.TRUNCATE) is RoundingMode.TRUNCATE
    with pytest.raises(ValueError):
        RoundingMode.parse("banker")


def test_float_format_validation():
    with pytest.raises(ValueError):
        FloatFormat("bad", 0, 2)


def test_fp16_encode_matches_numpy_half():
    rng = np.random.default_rng(3)
    x = (rng.standard_normal(20000) * np.exp2(rng.uniform(-20, 15, 20000))).astype(np.float32)
    x = x[np.abs(x) <= 65504]
    ref = x.astype(np.float16).view(np.uint16)
    assert np.array_equal(encode(x, FP16).codes, ref)


def test_format_sci():
    assert format_sci(2.0**-14) == "6.10e-5"
    assert format_sci(float(np.finfo(np.float32).max)) == "3.40e+38"


def test_range_report_rows():
    rows = range_report().splitlines()
    fp32 = next(r for r in rows if r.startswith("IEEE-754 float"))
    fp16 = next(r for r in rows if r.startswith("IEEE-754 half"))
    fp8 = next(r for r in rows if r.startswith("FP8"))
    assert fp32.split()[-3:] == ["3.40e+38", "1.17e-38", "1.40e-45"]
    assert fp16.split()[-3:] == ["65504", "6.10e-5", "5.96e-8"]
    assert fp8.split()[-3:] == ["57344", "6.10e-5", "1.52e-5"]


def test_matches_ml_dtypes_below_overflow_band():
    ml_dtypes = pytest.importorskip("ml_dtypes")
    rng = np.random.default_rng(11)
    x = (rng.standard_normal(50000) * np.exp2(rng.uniform(-20, 15, 50000))).astype(np.float32)
    x = x[np.abs(x) <= FP8_MAX]
    ref = x.astype(ml_dtypes.float8_e5m2).view(np.uint8)
    assert np.array_equal(encode(x, FP8).codes, ref)


def test_quantize_values_is_decode_of_encode():
    x = np.linspace(-3, 3, 101)
    assert np.array_equal(quantize_values(x), decode(encode(x).codes))


def test_stochastic_tie_frequency():
    # 1.125 sits halfway between 1.0 and 1.25: P(up) = 0.5, sigma = sqrt(0.25 / n)
    n = 10**5
    v = stochastic_round(np.full(n, 1.125, np.float32), FP8, RngStream(0x1F2E))
    assert abs(np.mean(v == 1.25) - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_stochastic_mean_over_a_million_draws():
    n = 10**6
    x = np.float32(1.1)
    v = stochastic_round(np.full(n, x), FP8, RngStream(0xACE1))
    assert abs(v.mean() - float(x)) <= 3 * (0.25 / 2) / np.sqrt(n)


def test_draw_resolution_sets_the_bias_floor():
    # one full register period is the exact expectation of the stream
    x = np.float32(1.1)
    tol = 3 * (0.25 / 2) / np.sqrt(10**6)
    bias = {}
    for bits in (8, 16):
        rng = RngStream(0xACE1, out_bits=bits)
        bias[bits] = abs(stochastic_round(np.full(rng.period, x), FP8, rng).mean() - float(x))
    assert bias[8] > tol  # 8-bit draws could not meet the 10^6-draw bound
    assert bias[16] < tol / 100
