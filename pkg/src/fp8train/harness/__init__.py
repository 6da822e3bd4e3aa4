"""From-scratch mixed-precision training harness."""

from fp8train.harness.data import Dataset, make_bars, make_blobs, make_linear, make_rings
from fp8train.harness.layers import Precision, QuantContext
from fp8train.harness.model import (
    LayerSpec,
    Model,
    ModelSpec,
    Regularizer,
    architecture,
    assign_precision,
    build_model,
    precision_map,
)
from fp8train.harness.optim import OptimizerState, StepReport, l2_loss, weight_update
from fp8train.harness.train import (
    DivergenceError,
    TrainConfig,
    TrainResult,
    backward,
    evaluate,
    forward,
    gradient_check,
    metrics_to_csv,
    reports_to_csv,
    train,
    train_step,
)
