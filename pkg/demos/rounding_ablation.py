"""Rounding and regularization ablation against the paired-seed FP32 baseline.

    python demos/rounding_ablation.py [--epochs N] [--seed S]

Compares nearest-even rounding with L2, dropout or no regularizer, and
stochastic rounding with L2, all in FP8, to an FP32 run with the same seed.
"""

from __future__ import annotations

import argparse

from fp8train.experiments import run_preset


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--output-dir", default="runs/demo-ablation")
    args = ap.parse_args()

    over = {"epochs": args.epochs, "seed": args.seed}
    arts = run_preset("fp32-baseline", over, f"{args.output_dir}/baseline")
    arts += run_preset("rounding-ablation", over, f"{args.output_dir}/fp8")
    base = arts[0].summary()["final_val_acc"]
    print(f"{'run':<12} {'val acc':>8} {'vs fp32':>8} {'train loss':>10}")
    for a in arts:
        s = a.summary()
        print(f"{s['run']:<12} {s['final_val_acc']:>8.4f} {s['final_val_acc'] - base:>+8.4f} {s['final_train_loss']:>10.4f}")


if __name__ == "__main__":
    main()
