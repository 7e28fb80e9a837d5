"""Discrete time grid: millisecond timestamps <-> timestamp class indices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field


class GridError(ValueError):
    """Invalid grid definition, timestamp, or index."""


def num_classes_for(step_ms: int, max_duration_ms: int) -> int:
    """Number of timestamp classes for a grid of `step_ms` covering `max_duration_ms`."""
    if step_ms <= 0 or max_duration_ms <= 0:
        raise GridError(f"grid requires positive step and duration, got {step_ms}, {max_duration_ms}")
    return math.ceil(max_duration_ms / step_ms)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discretization of [0, max_duration_ms) into fixed-width classes.

    Defaults give 3750 classes (300 s at 80 ms per class).
    """

    step_ms: int = 80
    max_duration_ms: int = 300_000
    num_classes: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "num_classes", num_classes_for(self.step_ms, self.max_duration_ms))


def discretize(t_ms: int, grid: TimeGrid) -> int:
    """Map a millisecond timestamp to its class index, clamping overruns to the last class."""
    if t_ms < 0:
        raise GridError(f"negative timestamp: {t_ms}")
    return min(t_ms // grid.step_ms, grid.num_classes - 1)


def to_milliseconds(idx: int, grid: TimeGrid) -> int:
    """Map a class index back to the millisecond start of its cell."""
    if not 0 <= idx < grid.num_classes:
        raise GridError(f"index {idx} outside [0, {grid.num_classes})")
    return idx * grid.step_ms
