"""Quantization nodes and FP8-input compute kernels with FP32 accumulation.

Tensors are plain ``float32`` ndarrays. A :class:`QuantizedTensor` holds the
integer codes produced by a Q node along with the counters the loss scaler
and the training reports consume.

Kernels decode operands to FP32 on the fly and accumulate in FP32 with a
fixed order: reduction index ascending, one rounded multiply and one rounded
add per term. A product of two FP8 (or two FP16) values is exact in FP32, so
only the additions round. BLAS is deliberately not used because its blocking
and FMA use make results depend on the library build.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fp8train.formats import FP8, FP16, FloatFormat, RoundingMode, decode, encode
from fp8train.lfsr import RngStream

__all__ = [
    "QuantConfig",
    "QuantizedTensor",
    "quantize",
    "dequantize",
    "ordered_matmul",
    "gemm_fp8",
    "conv2d_fp8",
    "conv2d_direct",
    "conv2d_im2col",
    "im2col",
    "col2im",
    "conv_output_shape",
]


@dataclass(frozen=True)
class QuantConfig:
    mode: RoundingMode = RoundingMode.NEAREST_EVEN
    seed: int = 0xACE1
    saturate_on_overflow: bool = False
    fmt: FloatFormat = FP8

    def __post_init__(self) -> None:
        if self.seed == 0:
            raise ValueError("quantization seed must be nonzero")
        object.__setattr__(self, "mode", RoundingMode.parse(self.mode))


@dataclass
class QuantizedTensor:
    codes: np.ndarray
    fmt: FloatFormat = FP8
    mode_used: RoundingMode = RoundingMode.NEAREST_EVEN
    overflow_count: int = 0
    underflow_count: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    @property
    def size(self) -> int:
        return self.codes.size

    def values(self) -> np.ndarray:
        return dequantize(self)

    def __repr__(self) -> str:
        return (
            f"QuantizedTensor(shape={self.shape}, fmt={self.fmt.name}, "
            f"mode={self.mode_used.value}, overflow={self.overflow_count}, "
            f"underflow={self.underflow_count})"
        )


def quantize(
    t,
    cfg: QuantConfig | None = None,
    rng: RngStream | None = None,
    fmt: FloatFormat | None = None,
    mode: RoundingMode | None = None,
) -> QuantizedTensor:
    """Q node: element-wise encode of ``t`` under ``cfg``.

    Stochastic rounding consumes ``t.size`` draws from ``rng`` in C order, so
    element ``i`` always sees draw ``i`` of the stream. When ``rng`` is omitted
    a fresh stream seeded from ``cfg.seed`` is used, which makes the result a
    pure function of ``(t, cfg)``. ``fmt``/``mode`` override the config.
    """
    cfg = cfg or QuantConfig()
    fmt = fmt or cfg.fmt
    mode = RoundingMode.parse(mode or cfg.mode)
    if mode is RoundingMode.STOCHASTIC:
        rng = rng or RngStream(cfg.seed)
    else:
        rng = None
    res = encode(np.asarray(t, dtype=np.float32), fmt, mode, rng, cfg.saturate_on_overflow)
    return QuantizedTensor(
        codes=res.codes,
        fmt=fmt,
        mode_used=mode,
        overflow_count=int(res.overflowed.sum()),
        underflow_count=int(res.underflowed.sum()),
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return decode(q.codes, q.fmt).astype(np.float32)


def _operand(x) -> np.ndarray:
    if isinstance(x, QuantizedTensor):
        if x.fmt not in (FP8, FP16):
            raise ValueError(f"kernel operands must be FP8 or FP16, got {x.fmt.name}")
        return dequantize(x)
    return np.asarray(x)


def ordered_matmul(a, b, dtype=np.float32, chunk_elems: int = 1 << 22) -> np.ndarray:
    """``a @ b`` accumulated term by term in ``dtype``, reduction index ascending.

    Products for a block of reduction indices are formed at once and summed
    with ``np.add.accumulate``, whose output is defined by the sequential
    recurrence ``out[k] = out[k-1] + x[k]`` and so cannot be reassociated.
    The running sum (initially +0) is folded into each block's first term,
    which is exactly the next step of the recurrence.
    """
    a = np.asarray(a, dtype=dtype)
    b = np.asarray(b, dtype=dtype)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("ordered_matmul expects 2-D operands")
    m, kdim = a.shape
    if kdim != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    n = b.shape[1]
    acc = np.zeros((m, n), dtype=dtype)
    if kdim == 0 or m == 0 or n == 0:
        return acc
    with np.errstate(over="ignore", invalid="ignore"):  # Inf/NaN propagate by design
        if m * n >= 4096:
            # wide output: one vector add per reduction index is already cheap
            for k in range(kdim):
                acc += a[:, k, None] * b[None, k, :]
            return acc
        step = max(1, chunk_elems // (m * n))
        at = np.ascontiguousarray(a.T)
        for k0 in range(0, kdim, step):
            prods = at[k0 : k0 + step, :, None] * b[k0 : k0 + step, None, :]
            prods[0] += acc  # also turns a leading -0 into +0, as 0 + (-0) does
            acc = np.add.accumulate(prods, axis=0)[-1]
    return np.ascontiguousarray(acc)


def gemm_fp8(a: QuantizedTensor, b: QuantizedTensor) -> np.ndarray:
    """``[M,K] x [K,N]`` product of quantized operands, unquantized FP32 output.

    FP16 operands are also accepted (used by boundary layers); their
    products are exact in FP32 as well.
    """
    return ordered_matmul(_operand(a), _operand(b), np.float32)


def conv_output_shape(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("kernel larger than padded input")
    return oh, ow


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects x [N,C,H,W] and w [F,C,kH,kW]")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")


def conv2d_direct(x, w, stride: int = 1, pad: int = 0, dtype=np.float32) -> np.ndarray:
    """Direct convolution; reduction over (c, i, j) in ascending C order."""
    x = np.asarray(x, dtype=dtype)
    w = np.asarray(w, dtype=dtype)
    _check_conv(x, w, stride, pad)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh, ow = conv_output_shape(h, wd, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    acc = np.zeros((n, f, oh, ow), dtype=dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, ci, i : i + stride * oh : stride, j : j + stride * ow : stride]
                    acc += patch[:, None, :, :] * w[None, :, ci, i, j, None, None]
    return acc


def im2col(x, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Patch matrix ``[N*OH*OW, C*kH*kW]`` with columns in (c, i, j) order."""
    x = np.asarray(x)
    n, c, h, wd = x.shape
    oh, ow = conv_output_shape(h, wd, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, oh, ow, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * oh * ow, c * kh * kw)


def col2im(
    cols, x_shape: tuple[int, ...], kh: int, kw: int, stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the input grid."""
    n, c, h, wd = x_shape
    oh, ow = conv_output_shape(h, wd, kh, kw, stride, pad)
    cols = np.asarray(cols).reshape(n, oh, ow, c, kh, kw)
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return xp[:, :, pad : pad + h, pad : pad + wd]


def conv2d_im2col(x, w, stride: int = 1, pad: int = 0, dtype=np.float32) -> np.ndarray:
    """Same convolution as :func:`conv2d_direct`, lowered to an ordered GEMM."""
    x = np.asarray(x, dtype=dtype)
    w = np.asarray(w, dtype=dtype)
    _check_conv(x, w, stride, pad)
    n, _, h, wd = x.shape
    f, c, kh, kw = w.shape
    oh, ow = conv_output_shape(h, wd, kh, kw, stride, pad)
    out = ordered_matmul(im2col(x, kh, kw, stride, pad), w.reshape(f, c * kh * kw).T, dtype)
    return out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2).copy()


def conv2d_fp8(
    x: QuantizedTensor, w: QuantizedTensor, stride: int = 1, pad: int = 0, method: str = "direct"
) -> np.ndarray:
    """Convolution of quantized input ``[N,C,H,W]`` and kernel ``[F,C,kH,kW]``; FP32 out."""
    xv, wv = _operand(x), _operand(w)
    if method == "direct":
        return conv2d_direct(xv, wv, stride, pad, np.float32)
    if method == "im2col":
        return conv2d_im2col(xv, wv, stride, pad, np.float32)
    raise ValueError(f"unknown conv method {method!r}")
