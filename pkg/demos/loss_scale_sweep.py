"""Loss-scale sweep on the deep toy net: constant scales 1, 100 and 10000 against FP32.

    python demos/loss_scale_sweep.py [--epochs N] [--output-dir DIR]

With scale 1 a sizeable share of error gradients flushes to zero in FP8 and
training stalls; a large scale keeps them representable.
"""

from __future__ import annotations

import argparse

from fp8train.experiments import run_preset


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--output-dir", default="runs/demo-lossscale")
    args = ap.parse_args()

    arts = run_preset("lossscale-sweep", {"epochs": args.epochs, "seed": args.seed}, args.output_dir)
    print(f"{'run':<12} {'train loss':>10} {'val acc':>8} {'underflow':>10}")
    for a in arts:
        s = a.summary()
        print(f"{s['run']:<12} {s['final_train_loss']:>10.4f} {s['final_val_acc']:>8.3f} {s['mean_underflow_fraction']:>10.4f}")
    print(f"logs in {args.output_dir}/")


if __name__ == "__main__":
    main()
