"""Trapezoidal quote ladder: arithmetic price and volume sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import ConfigurationError
from .book import DEPTH

MIN_TOTAL_VOLUME = 2 * DEPTH


def round_to_tick(price, tick_size):
    return math.floor(price / tick_size + 0.5) * tick_size


@dataclass(frozen=True)
class QuoteLadder:
    mid: float
    spread: float
    total_volume: float
    bid_levels: tuple
    ask_levels: tuple

    @property
    def best_bid(self):
        return self.bid_levels[0][0]

    @property
    def best_ask(self):
        return self.ask_levels[0][0]

    def side_volume(self, side):
        levels = self.bid_levels if side == "bid" else self.ask_levels
        return sum(v for _, v in levels)

    def prices(self):
        return {p for p, _ in self.bid_levels} | {p for p, _ in self.ask_levels}


def level_volumes(side_total, volume_slope):
    """Split ``side_total`` units over five levels decreasing by ``volume_slope``.

    Level ``k`` gets ``v1 - (k-1) * slope`` (floored, at least one unit) and the
    integer rounding residual goes to level 1.
    """
    v1 = (side_total + volume_slope * DEPTH * (DEPTH - 1) / 2.0) / DEPTH
    deeper = [max(1, math.floor(v1 - k * volume_slope + 1e-9)) for k in range(1, DEPTH)]
    # shrink deep levels if clipping left no room at the touch
    while side_total - sum(deeper) < 1:
        k = max(range(len(deeper)), key=lambda i: (deeper[i], i))
        if deeper[k] == 1:
            raise ConfigurationError("side volume too small for five levels")
        deeper[k] -= 1
    return [side_total - sum(deeper)] + deeper


def build_ladder(mid, spread, total_volume, tick_size, volume_slope=0.0):
    """Build the five-level bid/ask ladder around ``mid``.

    Best quotes are ``mid -/+ spread/2`` rounded to the tick; further levels
    step one tick away from the mid. Each side carries ``floor(total/2)``
    units split by :func:`level_volumes`.
    """
    if tick_size <= 0:
        raise ConfigurationError("tick size must be positive")
    if not math.isfinite(mid) or not math.isfinite(spread) or not math.isfinite(total_volume):
        raise ConfigurationError("ladder inputs must be finite")
    if spread < tick_size:
        raise ConfigurationError(f"spread {spread} below tick size {tick_size}")
    if total_volume < MIN_TOTAL_VOLUME:
        raise ConfigurationError(f"total volume {total_volume} below minimum {MIN_TOTAL_VOLUME}")
    if volume_slope < 0:
        raise ConfigurationError("volume_slope must be >= 0")
    bid_ticks = math.floor((mid - spread / 2.0) / tick_size + 0.5)
    ask_ticks = math.floor((mid + spread / 2.0) / tick_size + 0.5)
    if bid_ticks - (DEPTH - 1) < 1:
        raise ConfigurationError("ladder would quote non-positive prices")
    side_total = int(math.floor(total_volume / 2.0))
    vols = level_volumes(side_total, volume_slope)
    bids = tuple(((bid_ticks - k) * tick_size, vols[k]) for k in range(DEPTH))
    asks = tuple(((ask_ticks + k) * tick_size, vols[k]) for k in range(DEPTH))
    return QuoteLadder(0.5 * (bids[0][0] + asks[0][0]), asks[0][0] - bids[0][0], 2 * side_total, bids, asks)
