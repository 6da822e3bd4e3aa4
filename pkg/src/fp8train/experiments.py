"""Experiment configuration, presets and run artifacts.

A config is an INI file. Every key has a default, unknown sections or keys
are rejected, and the snapshot written next to a run's logs re-creates the
run exactly::

    [experiment]
    name = demo
    seed = 1
    output_dir = runs

    [data]
    dataset = rings        ; generator name, a .csv file or an IDX image file
    samples = 2048

    [model]
    architecture = mlp

    [training]
    epochs = 30

    [quantization]
    enabled = true
    rounding = stochastic

    [scaler]
    kind = dynamic
    initial_scale = 32768

    [regularizer]
    kind = l2
    value = 1e-4

A preset expands one base config into several paired-seed runs. Values are
layered as: field defaults, preset base, user config, per-run variant.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fp8train.formats import RoundingMode, range_report
from fp8train.harness.data import GENERATORS, Dataset, load_idx_dataset, read_csv_dataset
from fp8train.harness.model import Model, ModelSpec, Regularizer, architecture, build_model
from fp8train.harness.train import (
    DivergenceError,
    TrainConfig,
    TrainResult,
    metrics_to_csv,
    reports_to_csv,
    train,
)
from fp8train.scaling import ScalerKind, events_to_csv
from fp8train.tensor import QuantizedTensor
from fp8train.tensorfile import write_tensor

__all__ = [
    "ConfigError",
    "DatasetMissing",
    "ExperimentConfig",
    "RunArtifacts",
    "PRESETS",
    "ARTIFACT_FILES",
    "parse_config",
    "load_config",
    "parse_overrides",
    "build_from_config",
    "write_checkpoint",
    "expand",
    "load_dataset",
    "run_experiment",
    "run_preset",
    "comparison_csv",
]

ARTIFACT_FILES = ("config.ini", "steps.csv", "eval.csv", "range_report.txt", "scale_events.csv")


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


class DatasetMissing(FileNotFoundError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _schedule(text: str) -> tuple[tuple[int, float], ...]:
    """``"40:8192, 150:32768"`` -> ``((40, 8192.0), (150, 32768.0))``."""
    out = []
    for item in filter(None, (p.strip() for p in text.split(","))):
        it, _, val = item.partition(":")
        if not val:
            raise ValueError(f"schedule entry {item!r} is not iteration:scale")
        out.append((int(it), float(val)))
    return tuple(out)


def _fmt_schedule(s) -> str:
    return ", ".join(f"{it}:{_fmt_float(v)}" for it, v in s)


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "default", "none") else float(text)


# (section, key) -> attribute name, parser, formatter
_SCHEMA: dict[tuple[str, str], tuple[str, object, object]] = {
    ("experiment", "name"): ("name", str, str),
    ("experiment", "preset"): ("preset", str, str),
    ("experiment", "seed"): ("seed", int, str),
    ("experiment", "output_dir"): ("output_dir", str, str),
    ("data", "dataset"): ("dataset", str, str),
    ("data", "labels"): ("labels", str, str),
    ("data", "samples"): ("samples", int, str),
    ("data", "noise"): ("noise", _opt_float, lambda v: "default" if v is None else _fmt_float(v)),
    ("data", "data_seed"): ("data_seed", int, str),
    ("data", "val_fraction"): ("val_fraction", float, _fmt_float),
    ("model", "architecture"): ("architecture", str, str),
    ("model", "init_gain"): ("init_gain", float, _fmt_float),
    ("model", "loss_weight"): ("loss_weight", float, _fmt_float),
    ("training", "epochs"): ("epochs", int, str),
    ("training", "batch_size"): ("batch_size", int, str),
    ("training", "learning_rate"): ("learning_rate", float, _fmt_float),
    ("training", "momentum"): ("momentum", float, _fmt_float),
    ("quantization", "enabled"): ("quantize", _bool, lambda v: str(v).lower()),
    ("quantization", "rounding"): ("rounding", str, str),
    ("quantization", "saturate"): ("saturate", _bool, lambda v: str(v).lower()),
    ("scaler", "kind"): ("scaler", str, str),
    ("scaler", "initial_scale"): ("initial_scale", float, _fmt_float),
    ("scaler", "schedule"): ("schedule", _schedule, _fmt_schedule),
    ("scaler", "growth_interval"): ("growth_interval", int, str),
    ("scaler", "backoff_factor"): ("backoff_factor", float, _fmt_float),
    ("scaler", "growth_factor"): ("growth_factor", float, _fmt_float),
    ("regularizer", "kind"): ("regularizer", str, str),
    ("regularizer", "value"): ("reg_value", float, _fmt_float),
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "run"
    preset: str = ""
    seed: int = 1
    output_dir: str = "runs"
    dataset: str = "blobs"
    labels: str = ""
    samples: int = 768
    noise: float | None = None
    data_seed: int = 0
    val_fraction: float = 0.25
    architecture: str = "mlp"
    init_gain: float = 1.0
    loss_weight: float = 1.0
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    quantize: bool = True
    rounding: str = "rne"
    saturate: bool = False
    scaler: str = "constant"
    initial_scale: float = 1.0
    schedule: tuple = ()
    growth_interval: int = 2000
    backoff_factor: float = 0.5
    growth_factor: float = 2.0
    regularizer: str = "none"
    reg_value: float = 0.0

    def __post_init__(self) -> None:
        try:
            RoundingMode.parse(self.rounding)
            ScalerKind(self.scaler)
            Regularizer(self.regularizer, self.reg_value)
            self.train_config().make_scaler()
            ModelSpec(architecture(self.architecture), loss_weight=self.loss_weight)
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.samples < 2 or not 0 < self.val_fraction < 1:
            raise ConfigError("need samples >= 2 and 0 < val_fraction < 1")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            quantize=self.quantize,
            rounding=self.rounding,
            saturate=self.saturate,
            seed=self.seed,
            scaler_kind=ScalerKind(self.scaler),
            initial_scale=self.initial_scale,
            scaler_schedule=tuple(self.schedule),
            growth_interval=self.growth_interval,
            backoff_factor=self.backoff_factor,
            growth_factor=self.growth_factor,
        )

    def to_ini(self) -> str:
        """Fully expanded snapshot (never carries a preset reference)."""
        cp = configparser.ConfigParser(interpolation=None)
        for (section, key), (attr, _, fmt) in _SCHEMA.items():
            if attr == "preset":
                continue
            if not cp.has_section(section):
                cp.add_section(section)
            cp.set(section, key, fmt(getattr(self, attr)))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def parse_overrides(text: str, source: str = "<config>") -> dict:
    """Parse INI text into ``{attribute: value}`` for the keys it sets."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    out = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            if (section, key) not in _SCHEMA:
                raise ConfigError(f"{source}: unknown key [{section}] {key}")
            attr, parse, _ = _SCHEMA[(section, key)]
            try:
                out[attr] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{section}] {key}: {exc}") from None
    return out


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    return ExperimentConfig(**parse_overrides(text, source))


def load_config(path) -> tuple[ExperimentConfig, dict]:
    """Read a config file; returns the config and the keys it set explicitly."""
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise DatasetMissing(f"config file not found: {p}") from None
    overrides = parse_overrides(text, str(p))
    return ExperimentConfig(**overrides), overrides


# Deep toy net for the loss-scale study. The objective weight of 2^-10 puts
# backward tensors in the magnitude range of large pooled nets (a mean over
# ~1000 positions); the learning rate carries the inverse factor so FP32
# dynamics match an unweighted run with step size 0.1.
_SWEEP_BASE = dict(
    name="lossscale-sweep",
    dataset="rings",
    samples=2048,
    noise=0.45,
    architecture="deep-mlp",
    loss_weight=2.0**-10,
    epochs=40,
    batch_size=128,
    learning_rate=0.1 * 2.0**10,
    rounding="rne",
    scaler="constant",
)

_ABLATION_BASE = dict(
    name="rounding-ablation",
    dataset="rings",
    samples=2048,
    noise=0.3,
    architecture="mlp",
    epochs=30,
    batch_size=32,
    learning_rate=0.05,
    scaler="dynamic",
    initial_scale=2.0**15,
)

PRESETS: dict[str, tuple[dict, list[tuple[str, dict]]]] = {
    "lossscale-sweep": (
        _SWEEP_BASE,
        [
            ("fp32", dict(quantize=False)),
            ("scale-1", dict(initial_scale=1.0)),
            ("scale-100", dict(initial_scale=100.0)),
            ("scale-10000", dict(initial_scale=10000.0)),
        ],
    ),
    "rounding-ablation": (
        _ABLATION_BASE,
        [
            ("rne-l2", dict(rounding="rne", regularizer="l2", reg_value=1e-4)),
            ("rne-dropout", dict(rounding="rne", regularizer="dropout", reg_value=0.1)),
            ("rne-none", dict(rounding="rne", regularizer="none", reg_value=0.0)),
            ("sr-l2", dict(rounding="stochastic", regularizer="l2", reg_value=1e-4)),
        ],
    ),
    "fp32-baseline": (
        dict(_ABLATION_BASE, name="fp32-baseline", regularizer="l2", reg_value=1e-4),
        [("fp32", dict(quantize=False))],
    ),
}


def expand(preset: str, overrides: dict | None = None) -> list[tuple[str, ExperimentConfig]]:
    """Per-run configs of ``preset`` with user ``overrides`` layered under the variants."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base, variants = PRESETS[preset]
    user = {k: v for k, v in (overrides or {}).items() if k != "preset"}
    runs = []
    for run_name, variant in variants:
        values = {**base, **user, **variant}
        values["name"] = f"{values.get('name', preset)}/{run_name}"
        runs.append((run_name, ExperimentConfig(**values)))
    return runs


def load_dataset(cfg: ExperimentConfig, regression: bool = False) -> Dataset:
    if cfg.dataset in GENERATORS:
        kw = dict(n=cfg.samples, seed=cfg.data_seed)
        if cfg.noise is not None:
            kw["noise"] = cfg.noise
        return GENERATORS[cfg.dataset](**kw)
    path = Path(cfg.dataset)
    if not path.is_file():
        raise DatasetMissing(
            f"dataset not found: {cfg.dataset!r} is neither a file nor one of {sorted(GENERATORS)}"
        )
    try:
        if path.suffix.lower() == ".csv":
            return read_csv_dataset(path, cfg.data_seed, cfg.val_fraction, regression)
        if not cfg.labels:
            raise ConfigError("[data] labels is required with an IDX image file")
        if not Path(cfg.labels).is_file():
            raise DatasetMissing(f"label file not found: {cfg.labels!r}")
        return load_idx_dataset(path, cfg.labels, cfg.data_seed, cfg.val_fraction)
    except (ConfigError, DatasetMissing):
        raise
    except ValueError as exc:
        raise ConfigError(f"cannot use dataset: {exc}") from None


def _arch_kwargs(name: str, ds: Dataset) -> dict:
    x = ds.x_train
    if name == "linreg":
        return {"n_in": int(np.prod(x.shape[1:]))}
    y = np.concatenate([ds.y_train, ds.y_val])
    if not np.issubdtype(y.dtype, np.integer):
        raise ConfigError(f"architecture {name!r} needs integer class labels")
    n_out = max(2, int(y.max()) + 1)
    if name == "convnet":
        if x.ndim != 4 or x.shape[2] != x.shape[3]:
            raise ConfigError("convnet needs square [N, C, H, W] images")
        return {"in_ch": x.shape[1], "size": x.shape[2], "n_out": n_out}
    if x.ndim != 2:
        raise ConfigError(f"architecture {name!r} needs flat [N, features] inputs")
    return {"n_in": x.shape[1], "n_out": n_out}


def build_from_config(cfg: ExperimentConfig, ds: Dataset) -> Model:
    spec = ModelSpec(
        architecture(cfg.architecture, **_arch_kwargs(cfg.architecture, ds)),
        Regularizer(cfg.regularizer, cfg.reg_value),
        seed=cfg.seed,
        init_gain=cfg.init_gain,
        loss_weight=cfg.loss_weight,
    )
    return build_model(spec)


@dataclass
class RunArtifacts:
    directory: Path
    config: ExperimentConfig
    result: TrainResult
    diverged: bool = False

    def path(self, name: str) -> Path:
        return self.directory / name

    def summary(self) -> dict:
        """Final-epoch metrics plus run-level counters, for comparison tables."""
        reports = self.result.reports
        last = self.result.metrics[-1] if self.result.metrics else {}
        uf = [r.grad_underflow_fraction for r in reports]
        return {
            "run": self.directory.name,
            "final_train_loss": last.get("train_loss", math.nan),
            "final_val_loss": last.get("val_loss", math.nan),
            "final_val_acc": last.get("val_acc", math.nan),
            "mean_underflow_fraction": float(np.mean(uf)) if uf else 0.0,
            "overflow_steps": sum(1 for r in reports if r.grad_overflow_count),
            "skipped_steps": sum(1 for r in reports if r.skipped),
            "final_scale": float(self.result.scaler.scale),
            "diverged": int(self.diverged),
        }


def _ensure_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PermissionError(f"cannot create output directory {path}: {exc}") from None


def write_checkpoint(directory: Path, model: Model, result: TrainResult) -> None:
    """Parameters as FP16 (or FP32) tensor files plus ``manifest.json``."""
    ckpt = directory / "checkpoint"
    _ensure_dir(ckpt)
    opt = result.opt
    params = {}
    for name in sorted(opt.master):
        fname = f"{name}.fp8t"
        if opt.master_fmt is None:
            write_tensor(ckpt / fname, opt.master[name])
        else:
            write_tensor(ckpt / fname, QuantizedTensor(opt.master[name], opt.master_fmt))
        params[name] = {"file": fname, "shape": list(opt.master[name].shape)}
    manifest = {
        "layers": [
            {
                "name": layer.name,
                "kind": ls.kind,
                "dims": list(ls.dims),
                "precision": ls.precision.value if ls.precision else None,
            }
            for layer, ls in zip(model.layers, model.layer_specs)
        ]
        + [{"name": "loss", "kind": model.layer_specs[-1].kind, "dims": [], "precision": None}],
        "params": params,
        "master_format": opt.master_fmt.name if opt.master_fmt else "fp32",
        "loss_weight": model.spec.loss_weight,
    }
    (ckpt / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_artifacts(directory: Path, cfg: ExperimentConfig, result: TrainResult) -> None:
    _ensure_dir(directory)
    files = {
        "config.ini": cfg.to_ini(),
        "steps.csv": reports_to_csv(result.reports),
        "eval.csv": metrics_to_csv(result.metrics),
        "range_report.txt": range_report() + "\n",
        "scale_events.csv": events_to_csv(result.scaler.events),
    }
    try:
        for name, text in files.items():
            (directory / name).write_text(text)
        if result.model is not None:
            write_checkpoint(directory, result.model, result)
    except OSError as exc:
        raise PermissionError(f"cannot write run artifacts to {directory}: {exc}") from None


def run_experiment(cfg: ExperimentConfig, directory=None) -> RunArtifacts:
    """Train one config and write its artifacts (also after a divergence abort).

    A diverged run is returned with ``diverged=True`` after its artifacts are
    written; callers map that to a nonzero exit status.
    """
    directory = Path(directory if directory is not None else cfg.output_dir)
    _ensure_dir(directory)
    ds = load_dataset(cfg, regression=cfg.architecture == "linreg")
    model = build_from_config(cfg, ds)
    diverged = False
    try:
        result = train(model, ds, cfg.train_config())
    except DivergenceError as exc:
        result, diverged = exc.result, True
    _write_artifacts(directory, cfg, result)
    return RunArtifacts(directory, cfg, result, diverged)


def _run_one(args):
    run_name, cfg, directory = args
    return run_experiment(cfg, directory)


def run_preset(
    preset: str, overrides: dict | None = None, output_dir=None, parallel: bool = False
) -> list[RunArtifacts]:
    """Run every variant of ``preset`` into ``<output_dir>/<run>/`` and write ``comparison.csv``.

    Runs are independent (each derives all streams from its own config), so
    ``parallel=True`` gives the same per-run logs as sequential execution.
    """
    runs = expand(preset, overrides)
    root = Path(output_dir if output_dir is not None else runs[0][1].output_dir)
    _ensure_dir(root)
    jobs = [(name, cfg, root / name) for name, cfg in runs]
    if parallel:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor() as pool:
            arts = list(pool.map(_run_one, jobs))
    else:
        arts = [_run_one(j) for j in jobs]
    try:
        (root / "comparison.csv").write_text(comparison_csv(arts))
    except OSError as exc:
        raise PermissionError(f"cannot write {root / 'comparison.csv'}: {exc}") from None
    return arts


def comparison_csv(arts) -> str:
    rows = [a.summary() for a in arts]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
