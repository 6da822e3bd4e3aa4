"""Fibonacci LFSR streams that feed stochastic rounding and dropout masks.

A stream owns one register. Each draw advances the register by a single
step and emits the top ``out_bits`` of the new state as a fraction in
``[0, 1)``. Bulk draws are served from a precomputed table of the full cycle,
so ``stream.uniform(n)`` is bit-identical to ``n`` calls of ``stream.next()``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = [
    "MAXIMAL_TAPS",
    "RngStream",
    "lfsr_step",
    "lfsr_period",
    "split_seeds",
]

# Tap positions (1-indexed from the output end) for maximal-length
# polynomials, e.g. x^16 + x^14 + x^13 + x^11 + 1.
MAXIMAL_TAPS: dict[int, tuple[int, ...]] = {
    8: (8, 6, 5, 4),
    12: (12, 11, 10, 4),
    16: (16, 14, 13, 11),
    20: (20, 17),
    24: (24, 23, 22, 17),
}


def lfsr_step(state: int, width: int, taps: tuple[int, ...]) -> int:
    """One Fibonacci shift: feedback bit enters at the MSB."""
    bit = 0
    for t in taps:
        bit ^= state >> (width - t)
    return (state >> 1) | ((bit & 1) << (width - 1))


def lfsr_period(seed: int, width: int = 16, taps: tuple[int, ...] | None = None) -> int:
    """Cycle length reached from ``seed`` by stepping until the state repeats."""
    taps = MAXIMAL_TAPS[width] if taps is None else tuple(taps)
    mask = (1 << width) - 1
    if seed & mask == 0:
        raise ValueError("LFSR seed must be nonzero")
    start = seed & mask
    state = lfsr_step(start, width, taps)
    n = 1
    while state != start:
        state = lfsr_step(state, width, taps)
        n += 1
        if n > mask + 1:
            # never returned to the seed: seed lies on a tail, not a cycle
            raise ValueError("register does not cycle back to the seed")
    return n


@lru_cache(maxsize=None)
def _cycle_table(width: int, taps: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    period = (1 << width) - 1
    seq = np.empty(period, dtype=np.uint32)
    state = 1
    for i in range(period):
        seq[i] = state
        state = lfsr_step(state, width, taps)
    if state != 1 or len(np.unique(seq)) != period:
        raise ValueError(f"taps {taps} are not maximal length for width {width}")
    index = np.zeros(1 << width, dtype=np.int64)
    index[seq] = np.arange(period)
    seq.setflags(write=False)
    index.setflags(write=False)
    return seq, index


def split_seeds(seed: int, n: int, width: int = 16) -> list[int]:
    """Derive ``n`` distinct nonzero register seeds from one integer seed."""
    period = (1 << width) - 1
    if n > period:
        raise ValueError("cannot derive more distinct seeds than register states")
    words = np.random.SeedSequence(seed).generate_state(4 * n + 8, dtype=np.uint64)
    out: list[int] = []
    for w in words:
        s = int(w % period) + 1
        if s not in out:
            out.append(s)
            if len(out) == n:
                return out
    # astronomically unlikely; fall back to consecutive states
    s = out[-1] if out else 1
    while len(out) < n:
        s = s % period + 1
        if s not in out:
            out.append(s)
    return out


class RngStream:
    """Deterministic pseudo-random fractions from a maximal-length LFSR.

    Parameters
    ----------
    seed : int
        Initial register state, must be nonzero modulo ``2**width``.
    width : int
        Register width in bits; the period is ``2**width - 1``.
    out_bits : int
        Bits emitted per sample (the top bits of the register).
    taps : tuple of int, optional
        Feedback taps; defaults to the table in :data:`MAXIMAL_TAPS`.
    """

    def __init__(
        self,
        seed: int,
        width: int = 16,
        out_bits: int = 16,
        taps: tuple[int, ...] | None = None,
    ) -> None:
        if taps is None:
            if width not in MAXIMAL_TAPS:
                raise ValueError(f"no default taps for width {width}")
            taps = MAXIMAL_TAPS[width]
        if not 1 <= out_bits <= width:
            raise ValueError("out_bits must be in [1, width]")
        state = int(seed) & ((1 << width) - 1)
        if state == 0:
            raise ValueError("LFSR seed must be nonzero (all-zero state is a fixed point)")
        self.width = width
        self.out_bits = out_bits
        self.taps = tuple(taps)
        self.seed = state
        self._seq, index = _cycle_table(width, self.taps)
        self._pos = int(index[state])

    @property
    def period(self) -> int:
        return len(self._seq)

    @property
    def state(self) -> int:
        return int(self._seq[self._pos])

    def _emit(self, states: np.ndarray) -> np.ndarray:
        shift = self.width - self.out_bits
        return (states >> shift).astype(np.float64) / float(1 << self.out_bits)

    def next(self) -> float:
        """Advance one step and return the emitted fraction."""
        self._pos = (self._pos + 1) % self.period
        return float(self._emit(self._seq[self._pos : self._pos + 1])[0])

    def uniform(self, n: int) -> np.ndarray:
        """``n`` successive draws as a float64 array."""
        n = int(n)
        idx = (self._pos + 1 + np.arange(n, dtype=np.int64)) % self.period
        if n:
            self._pos = int(idx[-1])
        return self._emit(self._seq[idx])

    def skip(self, n: int) -> None:
        """Advance ``n`` steps without emitting."""
        self._pos = (self._pos + int(n)) % self.period

    def fork(self, salt: int) -> "RngStream":
        """Independent stream whose seed is derived from this one and ``salt``."""
        (s,) = split_seeds(self.seed * 1_000_003 + int(salt), 1, self.width)
        return RngStream(s, self.width, self.out_bits, self.taps)

    def __repr__(self) -> str:
        return (
            f"RngStream(seed={self.seed:#x}, width={self.width}, "
            f"out_bits={self.out_bits}, state={self.state:#x})"
        )
