"""Integer EWMA smoothing of RSSI streams.

The weight of the newest sample is 1/2**s ("stability shift"), so one update
is a subtraction and an arithmetic right shift on a fixed-point accumulator:

    acc += ((raw << fraction_bits) - acc) >> s

The shift floors toward negative infinity, which keeps the output inside the
range of the inputs seen so far.

``update`` works on plain ints and, elementwise, on int64 numpy arrays so a
batch of independent streams can share one code path.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .channel import RSSI_MAX, RSSI_MIN

FEED_MODES = ("both", "uplink", "downlink")


class FilterNotReady(LookupError):
    """Raised when smoothing is requested before any sample was seen."""


@dataclass(frozen=True)
class FilterConfig:
    stability_shift: int = 6
    fraction_bits: int = 16
    # None disables staleness demotion
    staleness_ticks: int | None = 1000
    feed: str = "both"

    def __post_init__(self):
        if self.stability_shift < 0:
            raise ValueError("stability_shift must be >= 0")
        if self.fraction_bits < self.stability_shift:
            raise ValueError("fraction_bits must be >= stability_shift")
        if self.staleness_ticks is not None and self.staleness_ticks <= 0:
            raise ValueError("staleness_ticks must be positive or None")
        if self.feed not in FEED_MODES:
            raise ValueError(f"feed must be one of {FEED_MODES}, got {self.feed!r}")

    @property
    def alpha(self) -> float:
        return 1.0 / (1 << self.stability_shift)

    def accepts(self, direction: str) -> bool:
        return self.feed == "both" or self.feed == direction


@dataclass(frozen=True)
class FilterState:
    accumulator: int | np.ndarray = 0
    initialized: bool = False
    last_update_tick: int = -1
    fraction_bits: int = 16


def is_stale(state: FilterState, config: FilterConfig, tick: int) -> bool:
    if not state.initialized:
        return True
    if config.staleness_ticks is None:
        return False
    return tick - state.last_update_tick > config.staleness_ticks


def update(state: FilterState, config: FilterConfig, raw_rssi, tick: int) -> FilterState:
    raw = np.asarray(raw_rssi)
    if np.any(raw < RSSI_MIN) or np.any(raw > RSSI_MAX):
        raise ValueError(f"raw RSSI outside [{RSSI_MIN}, {RSSI_MAX}]: {raw_rssi!r}")
    if raw.ndim == 0:
        raw_fixed = int(raw_rssi) << config.fraction_bits
    else:
        raw_fixed = raw.astype(np.int64) << config.fraction_bits

    # paired uplink/downlink samples share a tick, so equal ticks are allowed
    if state.initialized and tick < state.last_update_tick:
        raise ValueError(
            f"tick {tick} precedes last update {state.last_update_tick}"
        )
    if not state.initialized or is_stale(state, config, tick):
        return FilterState(raw_fixed, True, tick, config.fraction_bits)
    acc = state.accumulator + ((raw_fixed - state.accumulator) >> config.stability_shift)
    return FilterState(acc, True, tick, config.fraction_bits)


def smoothed(state: FilterState):
    if not state.initialized:
        raise FilterNotReady("filter has not received any sample")
    return state.accumulator / float(1 << state.fraction_bits)


def reset(state: FilterState) -> FilterState:
    return replace(state, accumulator=0, initialized=False)


def filter_series(samples, config: FilterConfig) -> list[tuple[int, float]]:
    """Run one filter over ``(tick, raw_rssi)`` pairs; returns (tick, smoothed)."""
    state = FilterState()
    out = []
    for tick, raw in samples:
        state = update(state, config, raw, tick)
        out.append((tick, smoothed(state)))
    return out
