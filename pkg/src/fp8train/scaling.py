"""Loss scaling: constant, back-off dynamic, and a scheduled minimum floor.

The dynamic scaler halves the scale when a step produces non-finite
gradients and doubles it after ``growth_interval`` clean steps. The
minimum-threshold schedule puts an iteration-indexed floor under the scale so
that back-off can never drive it low enough for small gradients to flush to
zero in FP8.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ScalerKind",
    "ScaleAction",
    "ScaleEvent",
    "LossScaler",
    "events_to_csv",
    "replay",
]


class ScalerKind(enum.Enum):
    CONSTANT = "constant"
    DYNAMIC = "dynamic"


class ScaleAction(enum.Enum):
    NONE = "none"
    BACKOFF = "backoff"
    GROWTH = "growth"
    CLAMPED_TO_MIN = "clamped_to_min"


@dataclass(frozen=True)
class ScaleEvent:
    iteration: int
    action: ScaleAction
    scale_after: float


def _is_pow2(x: float) -> bool:
    m, _ = math.frexp(x)
    return x > 0 and m == 0.5


@dataclass
class LossScaler:
    kind: ScalerKind = ScalerKind.DYNAMIC
    scale: float = 2.0**15
    backoff_factor: float = 0.5
    growth_factor: float = 2.0
    growth_interval: int = 2000
    schedule: tuple[tuple[int, float], ...] = ()
    steps_since_overflow: int = 0
    events: list[ScaleEvent] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.kind = ScalerKind(self.kind)
        self.schedule = tuple((int(i), float(s)) for i, s in self.schedule)
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not 0 < self.backoff_factor < 1 or not self.growth_factor > 1:
            raise ValueError("need 0 < backoff_factor < 1 < growth_factor")
        if self.growth_interval < 1:
            raise ValueError("growth_interval must be >= 1")
        its = [i for i, _ in self.schedule]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ValueError("schedule iterations must be strictly increasing")
        if self.kind is ScalerKind.DYNAMIC:
            # keeps scaling and unscaling exact in binary arithmetic
            vals = [self.scale, self.backoff_factor, self.growth_factor]
            vals += [s for _, s in self.schedule]
            if not all(_is_pow2(v) for v in vals):
                raise ValueError("dynamic scaler values and factors must be powers of two")

    @classmethod
    def constant(cls, scale: float) -> "LossScaler":
        return cls(kind=ScalerKind.CONSTANT, scale=float(scale))

    def min_threshold(self, iteration: int) -> float:
        """Floor active at ``iteration``: last schedule entry at or before it, else 1."""
        floor = 1.0
        for it, value in self.schedule:
            if it <= iteration:
                floor = value
            else:
                break
        return floor

    def scale_loss(self, loss: float) -> np.float32:
        return np.float32(loss) * np.float32(self.scale)

    def unscale(self, g) -> np.ndarray:
        """Divide FP32 gradients by the current scale (Inf/NaN pass through)."""
        return np.asarray(g, dtype=np.float32) / np.float32(self.scale)

    def step(self, grads_finite: bool, iteration: int) -> ScaleEvent:
        """Advance the state machine once; call after inspecting the gradients."""
        if self.kind is ScalerKind.CONSTANT:
            ev = ScaleEvent(iteration, ScaleAction.NONE, self.scale)
            self.events.append(ev)
            return ev

        floor = self.min_threshold(iteration)
        action = ScaleAction.NONE
        if not grads_finite:
            self.steps_since_overflow = 0
            target = self.scale * self.backoff_factor
            if target < floor:
                self.scale = max(floor, self.scale)
                action = ScaleAction.CLAMPED_TO_MIN
            else:
                self.scale = target
                action = ScaleAction.BACKOFF
        else:
            self.steps_since_overflow += 1
            if self.steps_since_overflow >= self.growth_interval:
                self.scale *= self.growth_factor
                self.steps_since_overflow = 0
                action = ScaleAction.GROWTH
        if self.scale < floor:
            self.scale = floor
            action = ScaleAction.CLAMPED_TO_MIN
        ev = ScaleEvent(iteration, action, self.scale)
        self.events.append(ev)
        return ev

    def state_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "scale": self.scale,
            "backoff_factor": self.backoff_factor,
            "growth_factor": self.growth_factor,
            "growth_interval": self.growth_interval,
            "schedule": [list(p) for p in self.schedule],
            "steps_since_overflow": self.steps_since_overflow,
        }


def replay(initial: LossScaler, trace) -> list[float]:
    """Scales produced by feeding ``(iteration, grads_finite)`` pairs to a copy of ``initial``."""
    s = LossScaler(
        kind=initial.kind,
        scale=initial.scale,
        backoff_factor=initial.backoff_factor,
        growth_factor=initial.growth_factor,
        growth_interval=initial.growth_interval,
        schedule=initial.schedule,
        steps_since_overflow=initial.steps_since_overflow,
    )
    return [s.step(ok, it).scale_after for it, ok in trace]


def events_to_csv(events) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "action", "scale_after"])
    for ev in events:
        w.writerow([ev.iteration, ev.action.value, repr(float(ev.scale_after))])
    return buf.getvalue()
