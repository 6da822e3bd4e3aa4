"""Command-line front end.

Exit status::

    0   success
    2   training diverged (artifacts are still written)
    64  bad command line or malformed config
    65  garbled tensor input
    66  missing dataset, config or input file
    74  output cannot be written

``FP8TRAIN_OUTPUT_DIR`` overrides the output directory of ``train`` and
``sweep``; an explicit ``--output-dir`` wins over both.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from fp8train.experiments import (
    PRESETS,
    ConfigError,
    DatasetMissing,
    RunArtifacts,
    load_config,
    load_dataset,
    parse_overrides,
    run_experiment,
    run_preset,
)
from fp8train.formats import FP8, RoundingMode, decode, range_report
from fp8train.tensor import QuantConfig, QuantizedTensor, quantize
from fp8train.tensorfile import TensorFormatError, load_any, write_tensor

EXIT_OK = 0
EXIT_DIVERGED = 2
EXIT_USAGE = 64
EXIT_DATAERR = 65
EXIT_NOINPUT = 66
EXIT_IOERR = 74

OUTPUT_ENV = "FP8TRAIN_OUTPUT_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _output_dir(flag: str | None, configured: str) -> str:
    return flag or os.environ.get(OUTPUT_ENV) or configured


def _report_runs(arts: list[RunArtifacts]) -> int:
    for a in arts:
        s = a.summary()
        status = "DIVERGED" if a.diverged else "ok"
        acc = s["final_val_acc"]
        acc_txt = "" if np.isnan(acc) else f" val_acc={acc:.4f}"
        print(
            f"{a.directory}: {status} train_loss={s['final_train_loss']:.6g}{acc_txt} "
            f"underflow={s['mean_underflow_fraction']:.4f} skipped={s['skipped_steps']}"
        )
    return EXIT_DIVERGED if any(a.diverged for a in arts) else EXIT_OK


def cmd_range_report(args) -> int:
    print(range_report())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, overrides = load_config(args.config)
    out = _output_dir(args.output_dir, cfg.output_dir)
    if cfg.preset:
        arts = run_preset(cfg.preset, overrides, out, parallel=args.parallel)
        print(f"wrote {Path(out) / 'comparison.csv'}")
        return _report_runs(arts)
    # fail on a missing dataset before creating any output
    load_dataset(cfg, regression=cfg.architecture == "linreg")
    return _report_runs([run_experiment(cfg, out)])


def cmd_sweep(args) -> int:
    overrides = {}
    if args.config:
        _, overrides = load_config(args.config)
    for item in args.set or ():
        section_key, _, value = item.partition("=")
        section, _, key = section_key.partition(".")
        if not value or not key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides.update(parse_overrides(f"[{section}]\n{key} = {value}\n", "--set"))
    base = PRESETS[args.preset][0] if args.preset in PRESETS else {}
    configured = overrides.get("output_dir") or str(Path("runs") / base.get("name", args.preset))
    out = _output_dir(args.output_dir, configured)
    arts = run_preset(args.preset, overrides, out, parallel=args.parallel)
    print(f"wrote {Path(out) / 'comparison.csv'}")
    return _report_runs(arts)


def _histogram(err: np.ndarray, bins: int = 8, width: int = 40) -> list[str]:
    if err.size == 0:
        return ["  (no finite elements)"]
    top = float(err.max())
    if top == 0.0:
        return [f"  [0, 0]  {err.size}"]
    counts, edges = np.histogram(err, bins=bins, range=(0.0, top))
    peak = counts.max()
    lines = []
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        bar = "#" * int(round(width * c / peak)) if peak else ""
        lines.append(f"  [{lo:.3e}, {hi:.3e})  {c:>8d}  {bar}")
    return lines


def cmd_quantize(args) -> int:
    src = Path(args.input)
    if not src.is_file():
        raise FileNotFoundError(f"input not found: {src}")
    t = load_any(src)
    if isinstance(t, QuantizedTensor):
        t = t.values()
    x = np.asarray(t, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise TensorFormatError(f"{src}: input holds non-finite values")
    cfg = QuantConfig(mode=RoundingMode.parse(args.mode), seed=args.seed, saturate_on_overflow=args.saturate)
    q = quantize(x, cfg)
    try:
        write_tensor(args.output, q)
    except OSError as exc:
        raise PermissionError(f"cannot write {args.output}: {exc}") from None
    vals = decode(q.codes, FP8)
    finite = np.isfinite(vals)
    err = np.abs(vals[finite] - x.astype(np.float64)[finite])
    print(f"elements:   {q.size}")
    print(f"mode:       {q.mode_used.value} (seed {args.seed:#x})" if q.mode_used is RoundingMode.STOCHASTIC
          else f"mode:       {q.mode_used.value}")
    print(f"overflow:   {q.overflow_count}")
    print(f"underflow:  {q.underflow_count}")
    print(f"mean |err|: {err.mean() if err.size else 0.0:.6g}")
    print(f"max |err|:  {err.max() if err.size else 0.0:.6g}")
    print("abs error histogram (finite outputs):")
    for line in _histogram(err):
        print(line)
    return EXIT_OK


def _seed(text: str) -> int:
    v = int(text, 0)
    if v == 0:
        raise argparse.ArgumentTypeError("seed must be nonzero")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fp8train", description="FP8 mixed-precision training emulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("range-report", help="print the FP32/FP16/FP8 dynamic range table")
    sp.set_defaults(func=cmd_range_report)

    sp = sub.add_parser("train", help="train from an INI config")
    sp.add_argument("config")
    sp.add_argument("--output-dir")
    sp.add_argument("--parallel", action="store_true", help="run preset variants in worker processes")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("quantize", help="quantize a tensor file to FP8")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--mode", default="rne", choices=["rne", "stochastic"])
    sp.add_argument("--seed", type=_seed, default=0xACE1)
    sp.add_argument("--saturate", action="store_true")
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("sweep", help="run a preset experiment")
    sp.add_argument("preset", choices=sorted(PRESETS))
    sp.add_argument("--config", help="INI file whose keys override the preset base")
    sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    sp.add_argument("--output-dir")
    sp.add_argument("--parallel", action="store_true")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetMissing as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_NOINPUT
    except TensorFormatError as exc:
        print(f"bad tensor file: {exc}", file=sys.stderr)
        return EXIT_DATAERR
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_NOINPUT
    except PermissionError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_IOERR
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IOERR


if __name__ == "__main__":
    sys.exit(main())
