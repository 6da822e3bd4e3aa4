"""Mixed-precision training loop.

One step::

    forward  (Q nodes on activations and weights, FP32 accumulation)
    loss     = cross-entropy + L2                (FP32)
    backward from d(scale * loss)/d(logits)      (Q nodes on errors and weight grads)
    weight_update                                (FP32 math, FP16 master weights)

Every random draw comes from seeded streams: the rounding LFSR, a separate
dropout LFSR and a numpy generator for shuffling. Two runs with the same
:class:`TrainConfig` produce identical step logs.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from fp8train.formats import FP16, RoundingMode
from fp8train.harness.data import Dataset
from fp8train.harness.layers import QuantContext
from fp8train.harness.model import Model
from fp8train.harness.optim import OptimizerState, StepReport, l2_loss, weight_update
from fp8train.lfsr import RngStream, split_seeds
from fp8train.scaling import LossScaler, ScalerKind

__all__ = [
    "TrainConfig",
    "TrainResult",
    "DivergenceError",
    "make_context",
    "forward",
    "backward",
    "train_step",
    "evaluate",
    "train",
    "gradient_check",
    "reports_to_csv",
    "metrics_to_csv",
]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    quantize: bool = True
    rounding: RoundingMode = RoundingMode.NEAREST_EVEN
    saturate: bool = False
    seed: int = 1  # rounding/dropout/shuffle streams derive from this
    scaler_kind: ScalerKind = ScalerKind.CONSTANT
    initial_scale: float = 1.0
    scaler_schedule: tuple[tuple[int, float], ...] = ()
    growth_interval: int = 2000
    backoff_factor: float = 0.5
    growth_factor: float = 2.0
    divergence_patience: int = 50

    def __post_init__(self) -> None:
        self.rounding = RoundingMode.parse(self.rounding)
        self.scaler_kind = ScalerKind(self.scaler_kind)
        if self.rounding is RoundingMode.TRUNCATE:
            raise ValueError("truncation is an oracle mode, not a training rounding mode")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def make_scaler(self) -> LossScaler:
        if self.scaler_kind is ScalerKind.CONSTANT:
            return LossScaler.constant(self.initial_scale)
        return LossScaler(
            kind=ScalerKind.DYNAMIC,
            scale=self.initial_scale,
            backoff_factor=self.backoff_factor,
            growth_factor=self.growth_factor,
            growth_interval=self.growth_interval,
            schedule=self.scaler_schedule,
        )

    def stream_seeds(self) -> dict[str, int]:
        rounding, dropout, evaluation = split_seeds(self.seed, 3)
        return {"rounding": rounding, "dropout": dropout, "eval": evaluation}


@dataclass
class TrainResult:
    opt: OptimizerState
    reports: list[StepReport]
    metrics: list[dict]
    scaler: LossScaler
    model: Model = field(repr=False, default=None)


class DivergenceError(RuntimeError):
    """Raised after ``divergence_patience`` consecutive non-finite losses."""

    def __init__(self, iteration: int, reports: list[StepReport], result: TrainResult | None = None):
        super().__init__(f"training diverged: non-finite loss up to iteration {iteration}")
        self.iteration = iteration
        self.reports = reports
        self.result = result


def make_context(cfg: TrainConfig, training: bool = True, dtype=np.float32, seed: int | None = None) -> QuantContext:
    seeds = cfg.stream_seeds()
    rng = RngStream(seed or seeds["rounding"]) if cfg.rounding is RoundingMode.STOCHASTIC else None
    return QuantContext(
        enabled=cfg.quantize,
        mode=cfg.rounding,
        saturate=cfg.saturate,
        rng=rng,
        dropout_rng=RngStream(seeds["dropout"]),
        training=training,
        dtype=dtype,
    )


def forward(model: Model, params: dict, x, y, ctx: QuantContext):
    """Run the layers and the loss head; returns ``(activations, loss)``."""
    acts = [np.asarray(x, ctx.dtype)]
    h = acts[0]
    with np.errstate(over="ignore", invalid="ignore"):  # overflow shows up as Inf/NaN loss
        for layer in model.layers:
            h = layer.forward(h, params, ctx)
            acts.append(h)
        loss = model.loss_layer.loss(h, y, ctx.dtype)
    return acts, loss


def backward(model: Model, params: dict, ctx: QuantContext, loss_scale: float = 1.0) -> dict:
    """Back-propagate ``loss_scale * loss_weight * loss``; returns weight gradients by name.

    Gradients are :class:`QuantizedTensor` objects when quantization is on,
    plain arrays otherwise. Q-node counters land in ``ctx.stats``.
    """
    g = model.loss_layer.grad(ctx.dtype) * ctx.dtype(loss_scale * model.spec.loss_weight)
    grads: dict = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in reversed(model.layers):
            g, pg = layer.backward(g, params, ctx)
            grads.update(pg)
    return grads


def train_step(
    model: Model,
    opt: OptimizerState,
    scaler: LossScaler,
    x,
    y,
    ctx: QuantContext,
    iteration: int,
    l2_lambda: float = 0.0,
) -> StepReport:
    params = opt.weights()
    ctx.training = True
    ctx.reset_stats()
    _, loss = forward(model, params, x, y, ctx)
    names = model.weight_names()
    l2 = l2_loss([params[n] for n in names], l2_lambda)
    grads = backward(model, params, ctx, scaler.scale)
    weight_overflow = sum(getattr(g, "overflow_count", 0) for g in grads.values())
    error_overflow = ctx.stats["overflow"] - weight_overflow
    report = weight_update(
        opt, grads, scaler, iteration, l2_lambda, names, extra_overflow=error_overflow
    )
    elems = ctx.stats["elems"]
    return replace(
        report,
        loss=float(loss),
        l2_loss=float(l2),
        grad_underflow_fraction=ctx.stats["underflow"] / elems if elems else 0.0,
    )


def evaluate(model: Model, params: dict, x, y, ctx: QuantContext, batch_size: int = 4096) -> dict:
    """Forward-only loss (and accuracy for classification) over ``x``."""
    ctx.training = False
    n = len(x)
    total, correct = 0.0, 0
    for s in range(0, n, batch_size):
        xb, yb = x[s : s + batch_size], y[s : s + batch_size]
        acts, loss = forward(model, params, xb, yb, ctx)
        total += float(loss) * len(xb)
        if model.task == "classification":
            correct += int((model.loss_layer.predict(acts[-1]) == yb).sum())
    out = {"loss": total / n}
    if model.task == "classification":
        out["acc"] = correct / n
    return out


def _eval_ctx(cfg: TrainConfig) -> QuantContext:
    # fresh stream per evaluation so metrics never perturb the training stream
    return make_context(cfg, training=False, seed=cfg.stream_seeds()["eval"])


def train(model: Model, dataset: Dataset, cfg: TrainConfig, opt: OptimizerState | None = None) -> TrainResult:
    """Train for ``cfg.epochs``; evaluates on train and validation sets after each epoch."""
    if opt is None:
        opt = OptimizerState.from_params(
            model.init_params(),
            cfg.learning_rate,
            cfg.momentum,
            FP16 if cfg.quantize else None,
        )
    scaler = cfg.make_scaler() if cfg.quantize else LossScaler.constant(1.0)
    ctx = make_context(cfg)
    lam = model.spec.regularizer.l2_lambda
    shuffle = np.random.default_rng([cfg.seed, 0x5EED])
    reports: list[StepReport] = []
    metrics: list[dict] = []
    result = TrainResult(opt, reports, metrics, scaler, model)
    it = 0
    bad = 0
    n = len(dataset.x_train)
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            rep = train_step(
                model, opt, scaler, dataset.x_train[idx], dataset.y_train[idx], ctx, it, lam
            )
            reports.append(rep)
            bad = bad + 1 if not math.isfinite(rep.loss) else 0
            if bad >= cfg.divergence_patience:
                raise DivergenceError(it, reports, result)
            it += 1
        params = opt.weights()
        tr = evaluate(model, params, dataset.x_train, dataset.y_train, _eval_ctx(cfg))
        va = evaluate(model, params, dataset.x_val, dataset.y_val, _eval_ctx(cfg))
        row = {"epoch": epoch, "iterations": it, "train_loss": tr["loss"], "val_loss": va["loss"]}
        if "acc" in tr:
            row["train_acc"] = tr["acc"]
            row["val_acc"] = va["acc"]
        row["l2_loss"] = float(l2_loss([params[k] for k in model.weight_names()], lam))
        row["scale"] = float(scaler.scale)
        metrics.append(row)
    return result


def _relu_pattern(model: Model, acts) -> list[np.ndarray]:
    return [acts[i] > 0 for i, layer in enumerate(model.layers) if layer.kind == "relu"]


def gradient_check(
    model: Model,
    params: dict,
    x,
    y,
    n_samples: int = 64,
    h: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative gap between analytic gradients and central differences.

    Runs with quantization off in float64; a float32 difference quotient at
    ``h = 1e-4`` would already carry ~1e-3 cancellation error. Relative gap is
    ``|a - n| / max(|a|, |n|, floor)``. Finite differences are taken on the
    weighted objective, i.e. scaled by ``loss_weight``.

    A coordinate whose +h or -h perturbation flips the sign of any ReLU
    input straddles a kink, where the loss has no derivative; such
    coordinates are passed over and further random coordinates are drawn
    until ``n_samples`` smooth ones have been checked (or all are used).
    """
    ctx = QuantContext(enabled=False, training=False, dtype=np.float64)
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    acts, _ = forward(model, p64, x, y, ctx)
    base = _relu_pattern(model, acts)
    grads = backward(model, p64, ctx, 1.0)

    rng = np.random.default_rng(seed)
    names = sorted(p64)
    sizes = np.array([p64[k].size for k in names])
    bounds = np.cumsum(sizes)
    worst = 0.0
    checked = 0
    for flat in rng.permutation(int(sizes.sum())):
        if checked >= n_samples:
            break
        j = int(np.searchsorted(bounds, flat, side="right"))
        name = names[j]
        i = int(flat - (bounds[j] - sizes[j]))
        arr = p64[name].reshape(-1)
        old = arr[i]
        arr[i] = old + h
        acts_p, lp = forward(model, p64, x, y, ctx)
        arr[i] = old - h
        acts_m, lm = forward(model, p64, x, y, ctx)
        arr[i] = old
        smooth = all(
            np.array_equal(b, q) and np.array_equal(b, r)
            for b, q, r in zip(base, _relu_pattern(model, acts_p), _relu_pattern(model, acts_m))
        )
        if not smooth:
            continue
        checked += 1
        numeric = model.spec.loss_weight * (float(lp) - float(lm)) / (2 * h)
        analytic = float(np.asarray(grads[name]).reshape(-1)[i])
        denom = max(abs(analytic), abs(numeric), floor)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


_REPORT_FIELDS = ("iteration", "loss", "l2_loss", "scale", "underflow_fraction", "overflow_count")


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_REPORT_FIELDS + ("skipped",))
    for r in reports:
        w.writerow(
            [
                r.iteration,
                repr(r.loss),
                repr(r.l2_loss),
                repr(float(r.scale)),
                repr(r.grad_underflow_fraction),
                r.grad_overflow_count,
                int(r.skipped),
            ]
        )
    return buf.getvalue()


def metrics_to_csv(metrics) -> str:
    if not metrics:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(metrics[0]), lineterminator="\n")
    w.writeheader()
    for row in metrics:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()
