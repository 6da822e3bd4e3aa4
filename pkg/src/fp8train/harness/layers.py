"""Layers with explicit forward/backward passes and Q nodes at every GEMM boundary.

A GEMM-class layer (Dense, Conv2d) quantizes its input activation and its
weights, runs the kernel with FP32 accumulation, adds the bias in FP32 and
quantizes the result. In the backward pass it quantizes the incoming error,
computes the weight gradient and the outgoing error with the same kernels,
and quantizes the weight gradient. Layers tagged ``FP16`` (the network
boundary) do all of this in FP16 instead of FP8.

With quantization disabled the same code runs in plain FP32 (or float64 for
gradient checking) and every Q node is the identity.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from fp8train.formats import FP8, FP16, FloatFormat, RoundingMode
from fp8train.lfsr import RngStream
from fp8train.tensor import (
    QuantConfig,
    QuantizedTensor,
    col2im,
    conv2d_direct,
    conv_output_shape,
    dequantize,
    im2col,
    ordered_matmul,
    quantize,
)

__all__ = [
    "Precision",
    "QuantContext",
    "Layer",
    "Dense",
    "Conv2d",
    "ReLU",
    "Tanh",
    "Sigmoid",
    "Dropout",
    "Flatten",
    "SoftmaxCrossEntropy",
    "MeanSquaredError",
]


class Precision(enum.Enum):
    FP8 = "fp8"
    FP16 = "fp16"

    @property
    def fmt(self) -> FloatFormat:
        return FP8 if self is Precision.FP8 else FP16


@dataclass
class QuantContext:
    """Per-pass quantization state shared by all layers.

    ``stats`` accumulates Q-node counters for the backward path (errors and
    weight gradients): total elements, elements flushed to zero, overflows.
    """

    enabled: bool = True
    mode: RoundingMode = RoundingMode.NEAREST_EVEN
    saturate: bool = False
    rng: RngStream | None = None
    dropout_rng: RngStream | None = None
    training: bool = True
    dtype: type = np.float32
    stats: dict = field(default_factory=lambda: {"elems": 0, "underflow": 0, "overflow": 0})

    def reset_stats(self) -> None:
        self.stats = {"elems": 0, "underflow": 0, "overflow": 0}

    def quant(self, x, fmt: FloatFormat, mode: RoundingMode | None = None, track: bool = False):
        """Q node. Returns a :class:`QuantizedTensor`, or ``x`` itself when disabled."""
        if not self.enabled:
            return np.asarray(x, dtype=self.dtype)
        mode = mode or self.mode
        rng = self.rng if mode is RoundingMode.STOCHASTIC else None
        if mode is RoundingMode.STOCHASTIC and rng is None:
            raise ValueError("stochastic rounding requested without a rounding stream")
        q = quantize(np.asarray(x, dtype=np.float32), fmt=fmt, mode=mode, rng=rng,
                     cfg=_SAT if self.saturate else _PLAIN)
        if track:
            self.stats["elems"] += q.size
            self.stats["underflow"] += q.underflow_count
            self.stats["overflow"] += q.overflow_count
        return q

    def values(self, q) -> np.ndarray:
        if isinstance(q, QuantizedTensor):
            return dequantize(q)
        return q

    def qv(self, x, fmt: FloatFormat, mode: RoundingMode | None = None, track: bool = False):
        return self.values(self.quant(x, fmt, mode, track))


_PLAIN = QuantConfig()
_SAT = QuantConfig(saturate_on_overflow=True)


class Layer:
    kind = "layer"
    params: tuple[str, ...] = ()
    precision: Precision | None = None

    def __init__(self, name: str) -> None:
        self.name = name

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def init_params(self, rng: np.random.Generator, gain: float = 1.0) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, p: dict, ctx: QuantContext):
        raise NotImplementedError

    def backward(self, dy, p: dict, ctx: QuantContext):
        """Return ``(dx, {param_name: grad})``."""
        raise NotImplementedError

    def __repr__(self) -> str:
        prec = f", {self.precision.value}" if self.precision else ""
        return f"{type(self).__name__}({self.name}{prec})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, name: str, n_in: int, n_out: int, precision: Precision = Precision.FP8):
        super().__init__(name)
        self.n_in, self.n_out = n_in, n_out
        self.precision = precision
        self.params = (f"{name}.W", f"{name}.b")

    def param_shapes(self):
        return {self.params[0]: (self.n_in, self.n_out), self.params[1]: (self.n_out,)}

    def init_params(self, rng, gain=1.0):
        std = gain * np.sqrt(2.0 / self.n_in)
        w = (rng.standard_normal((self.n_in, self.n_out)) * std).astype(np.float32)
        return {self.params[0]: w, self.params[1]: np.zeros(self.n_out, np.float32)}

    def forward(self, x, p, ctx):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"{self.name}: expected [B, {self.n_in}] input, got {x.shape}")
        fmt = self.precision.fmt
        wname, bname = self.params
        xq = ctx.qv(x, fmt)
        wq = ctx.qv(p[wname], fmt, RoundingMode.NEAREST_EVEN)
        bq = ctx.qv(p[bname], fmt, RoundingMode.NEAREST_EVEN)
        y = ordered_matmul(xq, wq, ctx.dtype) + bq[None, :]
        self._cache = (xq, wq)
        return ctx.qv(y, fmt)

    def backward(self, dy, p, ctx):
        fmt = self.precision.fmt
        xq, wq = self._cache
        dyq = ctx.qv(dy, fmt, track=True)
        dw = ordered_matmul(xq.T, dyq, ctx.dtype)
        db = ordered_matmul(np.ones((1, dyq.shape[0]), ctx.dtype), dyq, ctx.dtype)[0]
        dx = ordered_matmul(dyq, wq.T, ctx.dtype)
        grads = {
            self.params[0]: ctx.quant(dw, fmt, track=True),
            self.params[1]: ctx.quant(db, fmt, track=True),
        }
        return dx, grads


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(
        self,
        name: str,
        in_ch: int,
        out_ch: int,
        k: int = 3,
        stride: int = 1,
        pad: int = 0,
        precision: Precision = Precision.FP8,
    ):
        super().__init__(name)
        self.in_ch, self.out_ch, self.k, self.stride, self.pad = in_ch, out_ch, k, stride, pad
        self.precision = precision
        self.params = (f"{name}.W", f"{name}.b")

    def param_shapes(self):
        return {self.params[0]: (self.out_ch, self.in_ch, self.k, self.k), self.params[1]: (self.out_ch,)}

    def init_params(self, rng, gain=1.0):
        fan_in = self.in_ch * self.k * self.k
        std = gain * np.sqrt(2.0 / fan_in)
        w = (rng.standard_normal((self.out_ch, self.in_ch, self.k, self.k)) * std).astype(np.float32)
        return {self.params[0]: w, self.params[1]: np.zeros(self.out_ch, np.float32)}

    def forward(self, x, p, ctx):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ValueError(f"{self.name}: expected [N, {self.in_ch}, H, W] input, got {x.shape}")
        fmt = self.precision.fmt
        wname, bname = self.params
        xq = ctx.qv(x, fmt)
        wq = ctx.qv(p[wname], fmt, RoundingMode.NEAREST_EVEN)
        bq = ctx.qv(p[bname], fmt, RoundingMode.NEAREST_EVEN)
        y = conv2d_direct(xq, wq, self.stride, self.pad, ctx.dtype) + bq[None, :, None, None]
        self._cache = (xq, wq)
        return ctx.qv(y, fmt)

    def backward(self, dy, p, ctx):
        fmt = self.precision.fmt
        xq, wq = self._cache
        n, c, h, w = xq.shape
        f = self.out_ch
        oh, ow = conv_output_shape(h, w, self.k, self.k, self.stride, self.pad)
        dyq = ctx.qv(dy, fmt, track=True)
        dy_mat = dyq.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
        cols = im2col(xq, self.k, self.k, self.stride, self.pad)
        dw = ordered_matmul(dy_mat.T, cols, ctx.dtype).reshape(wq.shape)
        db = ordered_matmul(np.ones((1, dy_mat.shape[0]), ctx.dtype), dy_mat, ctx.dtype)[0]
        dcols = ordered_matmul(dy_mat, wq.reshape(f, -1), ctx.dtype)
        dx = col2im(dcols, xq.shape, self.k, self.k, self.stride, self.pad)
        grads = {
            self.params[0]: ctx.quant(dw, fmt, track=True),
            self.params[1]: ctx.quant(db, fmt, track=True),
        }
        return dx, grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, p, ctx):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(ctx.dtype)

    def backward(self, dy, p, ctx):
        return np.where(self._mask, dy, 0).astype(ctx.dtype), {}


class Tanh(Layer):
    """Elementwise tanh, held in FP16 when quantizing."""

    kind = "tanh"

    def forward(self, x, p, ctx):
        self._y = ctx.qv(np.tanh(np.asarray(x, ctx.dtype)), FP16)
        return self._y

    def backward(self, dy, p, ctx):
        dx = np.asarray(dy, ctx.dtype) * (1 - self._y * self._y)
        return ctx.qv(dx, FP16, track=True), {}


class Sigmoid(Layer):
    """Elementwise logistic, held in FP16 when quantizing."""

    kind = "sigmoid"

    def forward(self, x, p, ctx):
        x = np.asarray(x, ctx.dtype)
        s = np.exp(-np.logaddexp(0, -x)).astype(ctx.dtype)
        self._y = ctx.qv(s, FP16)
        return self._y

    def backward(self, dy, p, ctx):
        dx = np.asarray(dy, ctx.dtype) * self._y * (1 - self._y)
        return ctx.qv(dx, FP16, track=True), {}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name: str, p: float):
        super().__init__(name)
        if not 0 <= p < 1:
            raise ValueError("dropout probability must be in [0, 1)")
        self.p = p

    def forward(self, x, p, ctx):
        if not ctx.training or self.p == 0:
            self._mask = None
            return x
        if ctx.dropout_rng is None:
            raise ValueError("dropout needs a dedicated stream in training mode")
        keep = ctx.dropout_rng.uniform(x.size).reshape(x.shape) >= self.p
        self._mask = keep.astype(ctx.dtype) / ctx.dtype(1 - self.p)
        return (x * self._mask).astype(ctx.dtype)

    def backward(self, dy, p, ctx):
        if self._mask is None:
            return dy, {}
        return (dy * self._mask).astype(ctx.dtype), {}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, p, ctx):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, p, ctx):
        return dy.reshape(self._shape), {}


class SoftmaxCrossEntropy(Layer):
    """Mean cross-entropy over the batch, computed in full precision."""

    kind = "softmax_ce"

    def loss(self, logits, labels, dtype=np.float32):
        z = np.asarray(logits, dtype)
        labels = np.asarray(labels).astype(np.int64).ravel()
        if z.ndim != 2 or z.shape[0] != labels.shape[0]:
            raise ValueError(f"logits {z.shape} do not match {labels.shape[0]} labels")
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        self._probs = np.exp(logp)
        self._labels = labels
        return dtype(-logp[np.arange(len(labels)), labels].mean())

    def grad(self, dtype=np.float32):
        g = self._probs.copy()
        g[np.arange(len(self._labels)), self._labels] -= 1
        return (g / len(self._labels)).astype(dtype)

    @staticmethod
    def predict(logits) -> np.ndarray:
        return np.argmax(logits, axis=1)


class MeanSquaredError(Layer):
    """``sum((y - t)^2) / (2 B)``; used for regression toys."""

    kind = "mse"

    def loss(self, y, target, dtype=np.float32):
        y = np.asarray(y, dtype)
        t = np.asarray(target, dtype).reshape(y.shape)
        self._diff = y - t
        return dtype(0.5 * (self._diff**2).sum() / y.shape[0])

    def grad(self, dtype=np.float32):
        return (self._diff / self._diff.shape[0]).astype(dtype)

    @staticmethod
    def predict(y) -> np.ndarray:
        return y
