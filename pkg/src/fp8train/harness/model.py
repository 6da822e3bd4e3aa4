"""Model descriptions, precision placement and the toy architectures."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fp8train.harness.layers import (
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MeanSquaredError,
    Precision,
    ReLU,
    Sigmoid,
    SoftmaxCrossEntropy,
    Tanh,
)

__all__ = [
    "LayerSpec",
    "Regularizer",
    "ModelSpec",
    "Model",
    "build_model",
    "assign_precision",
    "precision_map",
    "ARCHITECTURES",
    "architecture",
]

GEMM_KINDS = ("dense", "conv2d")
LOSS_KINDS = ("softmax_ce", "mse")
_ACT_KINDS = ("relu", "tanh", "sigmoid")


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``dims`` holds the kind-specific shape parameters.

    dense: ``(n_in, n_out)``; conv2d: ``(in_ch, out_ch, k, stride, pad)``;
    dropout: ``(p,)``; everything else: ``()``. ``precision`` of ``None``
    lets :func:`assign_precision` choose.
    """

    kind: str
    dims: tuple = ()
    precision: Precision | None = None


@dataclass(frozen=True)
class Regularizer:
    kind: str = "none"  # "l2" | "dropout" | "none"
    value: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("l2", "dropout", "none"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if self.value < 0:
            raise ValueError("regularizer strength must be >= 0")

    @property
    def l2_lambda(self) -> float:
        return self.value if self.kind == "l2" else 0.0


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    regularizer: Regularizer = field(default_factory=Regularizer)
    seed: int = 0
    init_gain: float = 1.0
    boundary_fp16: bool = True
    # multiplies the training objective (not the reported loss); a value of
    # 1/N reproduces the gradient magnitudes of a mean over N extra positions
    loss_weight: float = 1.0

    def __post_init__(self) -> None:
        if not self.loss_weight > 0:
            raise ValueError("loss_weight must be > 0")
        kinds = [l.kind for l in self.layers]
        n_loss = sum(k in LOSS_KINDS for k in kinds)
        if n_loss != 1 or kinds[-1] not in LOSS_KINDS:
            raise ValueError("a model needs exactly one loss layer, at the end")


def assign_precision(layers, boundary_fp16: bool = True) -> list[LayerSpec]:
    """Fill in precisions: first GEMM/conv and last dense at FP16, the rest FP8.

    Explicit tags are honoured only if they agree with that placement rule.
    """
    gemm_idx = [i for i, l in enumerate(layers) if l.kind in GEMM_KINDS]
    dense_idx = [i for i in gemm_idx if layers[i].kind == "dense"]
    boundary = set()
    if boundary_fp16 and gemm_idx:
        boundary.add(gemm_idx[0])
        if dense_idx:
            boundary.add(dense_idx[-1])
    out = []
    for i, l in enumerate(layers):
        if l.kind not in GEMM_KINDS:
            out.append(l)
            continue
        want = Precision.FP16 if i in boundary else Precision.FP8
        if l.precision is Precision.FP16 and i not in boundary:
            raise ValueError(f"layer {i} ({l.kind}) is interior and must be FP8")
        out.append(LayerSpec(l.kind, l.dims, l.precision or want))
    return out


def _with_dropout(layers: list[LayerSpec], p: float) -> list[LayerSpec]:
    # after every hidden activation, i.e. not feeding straight into the loss
    last_gemm = max(i for i, l in enumerate(layers) if l.kind in GEMM_KINDS)
    out = []
    for i, l in enumerate(layers):
        out.append(l)
        if l.kind in _ACT_KINDS and i < last_gemm:
            out.append(LayerSpec("dropout", (p,)))
    return out


class Model:
    """Ordered layers plus the loss head; parameters live outside (in the optimizer)."""

    def __init__(self, spec: ModelSpec) -> None:
        self.spec = spec
        layers = list(spec.layers)
        if spec.regularizer.kind == "dropout" and spec.regularizer.value > 0:
            layers = _with_dropout(layers, spec.regularizer.value)
        layers = assign_precision(layers, spec.boundary_fp16)
        self.layer_specs = layers
        self.layers: list[Layer] = []
        for i, ls in enumerate(layers[:-1]):
            self.layers.append(_make_layer(f"{ls.kind}{i}", ls))
        self.loss_layer = _make_layer("loss", layers[-1])

    @property
    def task(self) -> str:
        return "classification" if self.loss_layer.kind == "softmax_ce" else "regression"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            out.update(layer.param_shapes())
        return out

    def weight_names(self) -> list[str]:
        """Parameters subject to L2 (kernels, not biases)."""
        return [n for n in self.param_shapes() if n.endswith(".W")]

    def init_params(self) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(self.spec.seed)
        params: dict[str, np.ndarray] = {}
        for layer in self.layers:
            params.update(layer.init_params(rng, self.spec.init_gain))
        return params

    def __repr__(self) -> str:
        return f"Model({self.layers + [self.loss_layer]})"


def _make_layer(name: str, ls: LayerSpec) -> Layer:
    k, d = ls.kind, ls.dims
    if k == "dense":
        return Dense(name, *d, precision=ls.precision)
    if k == "conv2d":
        in_ch, out_ch, *rest = d
        ksize, stride, pad = list(rest) + [3, 1, 0][len(rest) :]
        return Conv2d(name, in_ch, out_ch, ksize, stride, pad, precision=ls.precision)
    simple = {
        "relu": ReLU,
        "tanh": Tanh,
        "sigmoid": Sigmoid,
        "flatten": Flatten,
        "softmax_ce": SoftmaxCrossEntropy,
        "mse": MeanSquaredError,
    }
    if k in simple:
        return simple[k](name)
    if k == "dropout":
        return Dropout(name, *d)
    raise ValueError(f"unknown layer kind {k!r}")


def build_model(spec: ModelSpec) -> Model:
    return Model(spec)


def precision_map(model: Model) -> list[tuple[str, Precision]]:
    """``(layer name, precision)`` for every GEMM/conv layer, in order."""
    return [(l.name, l.precision) for l in model.layers if l.kind in GEMM_KINDS]


def _mlp(n_in=2, hidden=32, depth=2, n_out=2, act="relu"):
    layers = [LayerSpec("dense", (n_in, hidden)), LayerSpec(act)]
    for _ in range(depth - 1):
        layers += [LayerSpec("dense", (hidden, hidden)), LayerSpec(act)]
    layers += [LayerSpec("dense", (hidden, n_out)), LayerSpec("softmax_ce")]
    return layers


def _convnet(in_ch=1, size=8, n_out=2):
    half = (size + 2 - 3) // 2 + 1
    return [
        LayerSpec("conv2d", (in_ch, 4, 3, 1, 1)),
        LayerSpec("relu"),
        LayerSpec("conv2d", (4, 8, 3, 2, 1)),
        LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", (8 * half * half, 16)),
        LayerSpec("relu"),
        LayerSpec("dense", (16, n_out)),
        LayerSpec("softmax_ce"),
    ]


def _linreg(n_in=4):
    return [LayerSpec("dense", (n_in, 1)), LayerSpec("mse")]


ARCHITECTURES = {
    "mlp": _mlp,
    "deep-mlp": lambda n_in=2, n_out=2: _mlp(n_in, hidden=16, depth=6, n_out=n_out),
    "convnet": _convnet,
    "linreg": _linreg,
}


def architecture(name: str, **kw) -> tuple[LayerSpec, ...]:
    try:
        return tuple(ARCHITECTURES[name](**kw))
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None
