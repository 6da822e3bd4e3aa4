"""Walk through the FP8 (1,5,2) grid: ranges, RNE vs stochastic rounding, flush to zero.

    python demos/rounding_walkthrough.py
"""

from __future__ import annotations

import numpy as np

from fp8train import FP8, RngStream, RoundingMode, decode, encode, quantize, range_report, ulp


def main() -> None:
    print(range_report())
    print()

    xs = np.array([1.1, 1.125, 1.375, 3.3, 1e-5, 7e-6, 60000.0], dtype=np.float32)
    rne = decode(encode(xs, FP8).codes)
    print(f"{'x':>12} {'ulp':>10} {'rne':>12}")
    for x, u, r in zip(xs, ulp(xs), rne):
        print(f"{x:>12.6g} {u:>10.3g} {r:>12.6g}")
    print()

    # stochastic rounding is unbiased: the mean over many draws approaches x
    x = np.float32(1.1)
    draws = quantize(np.full(50_000, x), mode=RoundingMode.STOCHASTIC, rng=RngStream(0xACE1))
    vals = decode(draws.codes)
    print(f"stochastic rounding of {x:g}: P(1.25) = {np.mean(vals == 1.25):.4f}, mean = {vals.mean():.5f}")
    print(f"nearest-even always gives {float(decode(encode(x, FP8).codes)):g}")
    print()

    # a gradient-sized tensor: how much of it survives FP8?
    g = np.random.default_rng(0).standard_normal(100_000).astype(np.float32) * np.float32(2.0**-16)
    for scale in (1.0, 2.0**8, 2.0**14):
        q = quantize(g * np.float32(scale))
        print(f"loss scale {scale:>8g}: {q.underflow_count / g.size:6.1%} flushed to zero, {q.overflow_count} overflowed")


if __name__ == "__main__":
    main()
