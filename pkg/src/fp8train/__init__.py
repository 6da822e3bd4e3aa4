"""Software emulation of FP8 (1,5,2) mixed-precision training."""

from fp8train.formats import (
    FP8,
    FP16,
    FP32,
    FloatFormat,
    RoundingMode,
    decode,
    dynamic_range,
    encode,
    quantize_values,
    range_report,
    ulp,
)
from fp8train.lfsr import RngStream, lfsr_period
from fp8train.scaling import LossScaler, ScaleAction, ScalerKind
from fp8train.tensor import (
    QuantConfig,
    QuantizedTensor,
    conv2d_fp8,
    dequantize,
    gemm_fp8,
    quantize,
)
from fp8train.tensorfile import TensorFormatError, read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "FP8",
    "FP16",
    "FP32",
    "FloatFormat",
    "RoundingMode",
    "decode",
    "dynamic_range",
    "encode",
    "quantize_values",
    "range_report",
    "ulp",
    "RngStream",
    "lfsr_period",
    "LossScaler",
    "ScaleAction",
    "ScalerKind",
    "QuantConfig",
    "QuantizedTensor",
    "conv2d_fp8",
    "dequantize",
    "gemm_fp8",
    "quantize",
    "TensorFormatError",
    "read_tensor",
    "write_tensor",
]
