"""Streaming exploration controller over windowed uncertainty statistics.

Per traffic dimension (publisher by default, configurable down to a single
global stream) the controller keeps a sliding count-based window of recent
uncertainty values and serves snapshots of the window mean and two
nearest-rank quantiles.  A bid qualifies for exploration when an explore coin
lands inside ``explore_fraction`` AND its uncertainty sits inside the
quantile band; the granted modifier is ``clamp(unc / mean, m_min, m_max)``.

Snapshot statistics are exact, not approximate: the mean comes from an
integer accumulator (floats are summed as exact multiples of 2^-1074, so the
reported mean is the correctly rounded true mean of the window) and the
quantiles are read from an incrementally maintained sorted copy of the
window.  A brute-force recomputation of the same window matches bit for bit.
"""

from __future__ import annotations

from bisect import bisect_left, insort
from collections import deque
from dataclasses import dataclass
from math import ceil, isfinite

import numpy as np

#: Scale used to represent finite floats as exact integers: every finite
#: double is an integer multiple of 2**-1074 (the subnormal ulp).
_EXACT_SHIFT = 1074


@dataclass(frozen=True)
class ControllerConfig:
    """Windowing, gating and clamping knobs for the exploration controller."""

    window_len: int = 10_000
    min_window_fill: int = 500
    explore_fraction: float = 0.10
    q_low: float = 0.30
    q_high: float = 0.99
    m_min: float = 1.0
    m_max: float = 3.0
    dimension: str = "publisher"

    def __post_init__(self) -> None:
        if self.window_len < 1:
            raise ValueError("window_len must be >= 1")
        if not 1 <= self.min_window_fill <= self.window_len:
            raise ValueError("need 1 <= min_window_fill <= window_len")
        if not 0.0 <= self.explore_fraction <= 1.0:
            raise ValueError("explore_fraction must be in [0, 1]")
        if not 0.0 <= self.q_low < self.q_high <= 1.0:
            raise ValueError("need 0 <= q_low < q_high <= 1")
        if not 1.0 <= self.m_min <= self.m_max:
            raise ValueError("need 1 <= m_min <= m_max")
        if self.dimension not in DIMENSIONS:
            raise ValueError(
                f"dimension must be one of {sorted(DIMENSIONS)}, got {self.dimension!r}"
            )


DIMENSIONS = ("publisher", "segment", "slot", "global")


def dimension_key(dimension: str, request) -> int:
    """Windowing key of a bid request under the configured dimension."""
    if dimension == "publisher":
        return request.publisher_id
    if dimension == "segment":
        return request.user_segment
    if dimension == "slot":
        return request.context_slot
    if dimension == "global":
        return 0
    raise ValueError(f"unknown dimension {dimension!r}")


@dataclass(frozen=True)
class ControllerSnapshot:
    """Fixed view of one dimension's window at ingest time."""

    mu_unc: float
    q_low_value: float
    q_high_value: float
    count: int
    ready: bool


class _ExactSum:
    """Running sum of doubles with no rounding: integer units of 2^-1074."""

    __slots__ = ("_acc",)

    def __init__(self) -> None:
        self._acc = 0

    @staticmethod
    def _to_units(value: float) -> int:
        num, den = value.as_integer_ratio()  # den is a power of two <= 2**1074
        return num << (_EXACT_SHIFT - (den.bit_length() - 1))

    def add(self, value: float) -> None:
        self._acc += self._to_units(value)

    def remove(self, value: float) -> None:
        self._acc -= self._to_units(value)

    def mean(self, count: int) -> float:
        # Big-int true division is correctly rounded, so this is the nearest
        # double to the exact rational mean of the window.
        return self._acc / (count << _EXACT_SHIFT)


class _Window:
    """Count-based sliding window with an exact sum and a sorted mirror."""

    __slots__ = ("values", "sorted_values", "exact_sum")

    def __init__(self) -> None:
        self.values: deque[float] = deque()
        self.sorted_values: list[float] = []
        self.exact_sum = _ExactSum()

    def push(self, value: float, window_len: int) -> None:
        if len(self.values) == window_len:
            old = self.values.popleft()
            del self.sorted_values[bisect_left(self.sorted_values, old)]
            self.exact_sum.remove(old)
        self.values.append(value)
        insort(self.sorted_values, value)
        self.exact_sum.add(value)


def nearest_rank_index(q: float, count: int) -> int:
    """Nearest-rank quantile position in a sorted sample of ``count`` items."""
    return min(max(ceil(q * count) - 1, 0), count - 1)


class ExplorationController:
    """Windowed uncertainty statistics and explore-gating per dimension."""

    def __init__(self, config: ControllerConfig):
        self.config = config
        self._windows: dict[int, _Window] = {}
        # Gate instrumentation, readable by audits and tests.
        self.coin_trials = 0
        self.granted = 0

    def ingest(self, key: int, unc: float) -> None:
        """Add one observed uncertainty to the dimension's window."""
        if not isfinite(unc):
            raise ValueError(f"uncertainty must be finite, got {unc!r}")
        if unc < 0:
            raise ValueError(f"uncertainty must be >= 0, got {unc!r}")
        window = self._windows.get(key)
        if window is None:
            window = self._windows[key] = _Window()
        window.push(unc, self.config.window_len)

    def snapshot(self, key: int) -> ControllerSnapshot:
        """Current exact window statistics for a dimension."""
        window = self._windows.get(key)
        count = 0 if window is None else len(window.values)
        if count == 0:
            return ControllerSnapshot(0.0, 0.0, 0.0, 0, False)
        srt = window.sorted_values
        return ControllerSnapshot(
            mu_unc=window.exact_sum.mean(count),
            q_low_value=srt[nearest_rank_index(self.config.q_low, count)],
            q_high_value=srt[nearest_rank_index(self.config.q_high, count)],
            count=count,
            ready=count >= self.config.min_window_fill,
        )

    def modifier(
        self,
        unc: float,
        snap: ControllerSnapshot,
        rng: np.random.Generator,
    ) -> float | None:
        """Explore decision for one bid: a clamped modifier, or None.

        The explore coin is flipped first, before the quantile-band filter,
        so the coin rate — not the band width — caps exploration volume.
        """
        if not snap.ready:
            return None
        self.coin_trials += 1
        if rng.random() >= self.config.explore_fraction:
            return None
        if unc < snap.q_low_value or unc > snap.q_high_value:
            return None
        if snap.mu_unc <= 0.0:
            return None
        self.granted += 1
        return min(max(unc / snap.mu_unc, self.config.m_min), self.config.m_max)
