from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fp8train.formats import FP16, RoundingMode
from fp8train.tensor import QuantConfig, QuantizedTensor, quantize
from fp8train.tensorfile import (
    MAGIC,
    TensorFormatError,
    from_bytes,
    load_any,
    read_csv_tensor,
    read_tensor,
    to_bytes,
    write_csv_tensor,
    write_tensor,
)

f32_arrays = hnp.arrays(
    np.float32,
    hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
    elements=st.floats(width=32, allow_nan=False),
)


def test_header_layout():
    t = quantize(np.array([[1.0, 1e6, 1e-9]], np.float32), QuantConfig(mode="stochastic"))
    raw = to_bytes(t)
    assert raw[:4] == MAGIC
    assert raw[4:8] == bytes([1, 2, 1, 2])  # version, rank, FP8 tag, stochastic tag
    assert struct.unpack(">II", raw[8:16]) == (1, 1)
    assert struct.unpack(">II", raw[16:24]) == (1, 3)
    assert raw[24:] == t.codes.tobytes()


@settings(max_examples=50, deadline=None)
@given(f32_arrays)
def test_fp8_round_trip(x):
    t = quantize(x)
    back = from_bytes(to_bytes(t))
    assert isinstance(back, QuantizedTensor)
    assert back.shape == t.shape
    assert np.array_equal(back.codes, t.codes)
    assert (back.overflow_count, back.underflow_count) == (t.overflow_count, t.underflow_count)
    assert back.mode_used is RoundingMode.NEAREST_EVEN


@settings(max_examples=50, deadline=None)
@given(f32_arrays)
def test_fp32_round_trip(x):
    back = from_bytes(to_bytes(x))
    assert back.dtype == np.float32
    assert np.array_equal(back.view(np.uint32), x.view(np.uint32))


def test_fp16_round_trip(tmp_path):
    t = quantize(np.linspace(-2, 2, 12, dtype=np.float32).reshape(3, 4), fmt=FP16)
    write_tensor(tmp_path / "h.fp8t", t)
    back = read_tensor(tmp_path / "h.fp8t")
    assert back.fmt is FP16
    assert np.array_equal(back.codes, t.codes)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b[:10],  # truncated header
        lambda b: b"XXXX" + b[4:],  # bad magic
        lambda b: b[:4] + b"\x09" + b[5:],  # unknown version
        lambda b: b[:6] + b"\x07" + b[7:],  # unknown dtype
        lambda b: b[:7] + b"\x09" + b[8:],  # unknown rounding tag
        lambda b: b[:-1],  # short payload
        lambda b: b + b"\x00",  # trailing bytes
    ],
)
def test_garbled_input_rejected(mutate):
    raw = to_bytes(quantize(np.ones((2, 3), np.float32)))
    with pytest.raises(TensorFormatError):
        from_bytes(mutate(raw))


def test_csv_round_trip_with_shape_line(tmp_path):
    x = np.arange(24, dtype=np.float32).reshape(2, 3, 4) / 7
    write_csv_tensor(tmp_path / "t.csv", x)
    assert (tmp_path / "t.csv").read_text().startswith("# shape: 2,3,4\n")
    assert np.array_equal(read_csv_tensor(tmp_path / "t.csv"), x)


def test_csv_without_shape_line(tmp_path):
    (tmp_path / "m.csv").write_text("1,2,3\n4,5,6\n")
    assert read_csv_tensor(tmp_path / "m.csv").shape == (2, 3)
    (tmp_path / "v.csv").write_text("1,2,3\n")
    assert read_csv_tensor(tmp_path / "v.csv").shape == (3,)


@pytest.mark.parametrize(
    "text",
    ["1,2\n3\n", "1,a\n", "", "# shape: 2,2\n1,2,3\n", "# shape: x\n1\n"],
)
def test_csv_errors(tmp_path, text):
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(TensorFormatError):
        read_csv_tensor(tmp_path / "bad.csv")


def test_load_any_dispatches(tmp_path):
    x = np.ones(4, np.float32)
    write_tensor(tmp_path / "a.bin", x)
    write_csv_tensor(tmp_path / "a.csv", x)
    assert np.array_equal(load_any(tmp_path / "a.bin"), x)
    assert np.array_equal(load_any(tmp_path / "a.csv"), x)
    (tmp_path / "junk").write_bytes(b"\xff\xfe\x00\x81")
    with pytest.raises(TensorFormatError):
        load_any(tmp_path / "junk")
