"""Heavy-ball momentum SGD over FP16 master weights.

Per step, for each parameter::

    g  = decode(grad_fp8) / loss_scale          (FP32)
    g += 2 * lambda * w                         (kernels only, when L2 is on)
    v  = mu * v + g
    w  = decode_fp16(master) - lr * v           (FP32)
    master = encode_fp16(w, nearest-even)

The whole step is skipped when any gradient is non-finite or any backward
Q node overflowed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fp8train.formats import FP16, FloatFormat, RoundingMode, decode, encode
from fp8train.scaling import LossScaler, ScaleEvent
from fp8train.tensor import QuantizedTensor, dequantize

__all__ = ["OptimizerState", "StepReport", "l2_loss", "weight_update", "gradients_finite"]


@dataclass
class OptimizerState:
    """Master weights (FP16 codes, or FP32 arrays when ``master_fmt`` is None) and momentum."""

    master: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    learning_rate: float = 0.05
    momentum_coeff: float = 0.9
    master_fmt: FloatFormat | None = FP16

    def __post_init__(self) -> None:
        if not 0 <= self.momentum_coeff < 1:
            raise ValueError("momentum coefficient must be in [0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")

    @classmethod
    def from_params(
        cls,
        params: dict[str, np.ndarray],
        learning_rate: float = 0.05,
        momentum_coeff: float = 0.9,
        master_fmt: FloatFormat | None = FP16,
    ) -> "OptimizerState":
        if master_fmt is None:
            master = {k: np.array(v, dtype=np.float32) for k, v in params.items()}
        else:
            master = {
                k: encode(np.asarray(v, np.float32), master_fmt, RoundingMode.NEAREST_EVEN).codes
                for k, v in params.items()
            }
        momentum = {k: np.zeros(np.shape(v), np.float32) for k, v in params.items()}
        return cls(master, momentum, learning_rate, momentum_coeff, master_fmt)

    def weight(self, name: str) -> np.ndarray:
        m = self.master[name]
        if self.master_fmt is None:
            return m
        return decode(m, self.master_fmt).astype(np.float32)

    def weights(self) -> dict[str, np.ndarray]:
        return {k: self.weight(k) for k in self.master}

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            {k: v.copy() for k, v in self.master.items()},
            {k: v.copy() for k, v in self.momentum.items()},
            self.learning_rate,
            self.momentum_coeff,
            self.master_fmt,
        )


@dataclass
class StepReport:
    iteration: int
    loss: float = float("nan")
    l2_loss: float = 0.0
    scale: float = 1.0
    grad_underflow_fraction: float = 0.0
    grad_overflow_count: int = 0
    scale_event: ScaleEvent | None = None
    skipped: bool = False
    extra: dict = field(default_factory=dict)


def l2_loss(weights, lam: float) -> np.float32:
    """``lam * sum(w**2)`` over all given weight arrays, in FP32."""
    if lam < 0:
        raise ValueError("weight decay must be >= 0")
    if lam == 0:
        return np.float32(0.0)
    total = np.float32(0.0)
    for w in weights:
        w = np.asarray(w, np.float32)
        total = total + np.sum(w * w, dtype=np.float32)
    return np.float32(lam) * total


def _grad_values(g) -> np.ndarray:
    if isinstance(g, QuantizedTensor):
        return dequantize(g)
    return np.asarray(g, np.float32)


def gradients_finite(grads: dict, extra_overflow: int = 0) -> bool:
    if extra_overflow:
        return False
    for g in grads.values():
        if isinstance(g, QuantizedTensor) and g.overflow_count:
            return False
        if not np.all(np.isfinite(_grad_values(g))):
            return False
    return True


def weight_update(
    opt: OptimizerState,
    grads: dict,
    scaler: LossScaler,
    iteration: int,
    l2_lambda: float = 0.0,
    decay_names=None,
    extra_overflow: int = 0,
) -> StepReport:
    """Apply one optimizer step in place unless the gradients overflowed.

    ``decay_names`` selects the parameters that receive the L2 gradient
    (default: names ending in ``.W``). ``extra_overflow`` carries overflow
    flags from backward Q nodes that are not weight gradients.
    """
    scale_used = scaler.scale
    finite = gradients_finite(grads, extra_overflow)
    unscaled = {k: scaler.unscale(_grad_values(g)) for k, g in grads.items()} if finite else {}
    n_over = sum(g.overflow_count for g in grads.values() if isinstance(g, QuantizedTensor))
    event = scaler.step(finite, iteration)
    report = StepReport(
        iteration=iteration,
        scale=scale_used,
        grad_overflow_count=n_over + extra_overflow,
        scale_event=event,
        skipped=not finite,
    )
    if not finite:
        return report

    if decay_names is None:
        decay_names = [k for k in grads if k.endswith(".W")]
    decay = set(decay_names) if l2_lambda else set()
    lr = np.float32(opt.learning_rate)
    mu = np.float32(opt.momentum_coeff)
    for name, g in unscaled.items():
        w = opt.weight(name)
        if name in decay:
            g = g + np.float32(2.0 * l2_lambda) * w
        v = mu * opt.momentum[name] + g
        opt.momentum[name] = v.astype(np.float32)
        w_new = (w - lr * v).astype(np.float32)
        if opt.master_fmt is None:
            opt.master[name] = w_new
        else:
            opt.master[name] = encode(w_new, opt.master_fmt, RoundingMode.NEAREST_EVEN).codes
    return report
