"""Snapshot-cadence market-making episodes.

Every step the policy's ladder rests for one interval and is matched
against the next snapshot; whatever did not fill is cancelled and a fresh
ladder is posted. A bid at price ``p`` is filled from the next snapshot's
asks at prices ``<= p`` plus the interval's last trade if it printed at
``<= p``, best levels first, so a deeper level only gets liquidity left over
by better ones. Asks are symmetric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError
from ..lobsim.ladder import build_ladder


@dataclass(frozen=True)
class Fill:
    step: int
    timestamp: int
    side: str
    price: float
    volume: float

    @property
    def cash_flow(self):
        return -self.price * self.volume if self.side == "buy" else self.price * self.volume


@dataclass
class EpisodeState:
    cash: float = 0.0
    inventory: float = 0.0
    ladder: object = None
    fills: list = field(default_factory=list)
    step_index: int = 0
    fees: float = 0.0


def match_ladder(ladder, snapshot):
    """Fills ``[(side, price, volume)]`` of ``ladder`` against ``snapshot``."""
    out = []
    trade = snapshot.last_trade
    taken = 0.0
    for price, vol in ladder.bid_levels:
        avail = sum(v for p, v in snapshot.asks if p <= price)
        if trade is not None and trade[0] <= price:
            avail += trade[1]
        q = min(vol, avail - taken)
        if q > 0:
            out.append(("buy", price, q))
            taken += q
    taken = 0.0
    for price, vol in ladder.ask_levels:
        avail = sum(v for p, v in snapshot.bids if p >= price)
        if trade is not None and trade[0] >= price:
            avail += trade[1]
        q = min(vol, avail - taken)
        if q > 0:
            out.append(("sell", price, q))
            taken += q
    return out


def step(state, ladder, next_snapshot, fee_rate=0.0):
    """Rest ``ladder`` for one interval, apply its fills, return the new state."""
    fills = list(state.fills)
    cash, inv, fees = state.cash, state.inventory, state.fees
    for side, price, vol in match_ladder(ladder, next_snapshot):
        f = Fill(state.step_index, next_snapshot.timestamp, side, price, vol)
        fee = fee_rate * price * vol
        cash += f.cash_flow - fee
        fees += fee
        inv += vol if side == "buy" else -vol
        fills.append(f)
    return EpisodeState(cash, inv, ladder, fills, state.step_index + 1, fees)


@dataclass
class EpisodeResult:
    """Outcome of one episode over decisions ``start .. stop - 2``.

    ``inventory`` and ``cash`` hold the position after every step, before
    liquidation; ``pnl`` includes liquidating the final inventory at
    ``final_mid``.
    """

    start: int
    stop: int
    fills: list
    inventory: np.ndarray
    cash: np.ndarray
    initial_cash: float
    final_mid: float
    liquidation_flow: float
    fees: float
    market_spread: float
    pnl: float

    @property
    def n_trades(self):
        return len(self.fills)

    @property
    def mean_abs_inventory(self):
        return math.fsum(abs(v) for v in self.inventory) / len(self.inventory) if len(self.inventory) else 0.0

    def accounting_gap(self):
        """Final wealth change minus the fill and liquidation flows (0 when consistent)."""
        flows = math.fsum([f.cash_flow for f in self.fills] + [self.liquidation_flow, -self.fees])
        wealth = self.cash[-1] + self.inventory[-1] * self.final_mid - self.initial_cash if len(self.cash) else 0.0
        return wealth - flows


def run_episode(policy, series, start, stop, volume_slope=0.0, fee_rate=0.0, initial_cash=0.0):
    """Run ``policy`` from decision ``start`` until the book at ``stop - 1``.

    Raises:
        DataError: window outside the series or shorter than two snapshots.
    """
    if start < 0 or stop > len(series) or stop - start < 2:
        raise DataError(f"episode window [{start}, {stop}) does not fit a series of length {len(series)}")
    decisions = np.arange(start, stop - 1)
    mids, spreads, vols = policy.predict(series, decisions)
    state = EpisodeState(cash=initial_cash)
    inventory = np.empty(len(decisions))
    cash = np.empty(len(decisions))
    tick = series.tick_size
    for k, t in enumerate(decisions):
        ladder = build_ladder(float(mids[k]), float(spreads[k]), float(vols[k]), tick, volume_slope)
        state = step(state, ladder, series[int(t) + 1], fee_rate)
        inventory[k] = state.inventory
        cash[k] = state.cash
    final_mid = float(series.mid[stop - 1])
    liquidation = state.inventory * final_mid
    pnl = state.cash + liquidation - initial_cash
    return EpisodeResult(start, stop, state.fills, inventory, cash, initial_cash, final_mid, liquidation, state.fees,
                         float(np.mean(series.spread[start:stop])), pnl)


def episode_windows(start, stop, length):
    """Consecutive ``[a, b)`` windows of ``length`` snapshots inside ``[start, stop)``."""
    if length < 2:
        raise DataError("episode length must be >= 2")
    return [(a, a + length) for a in range(start, stop - length + 1, length)]
