"""Five-level order book snapshots and fixed-cadence series."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError

DEPTH = 5
DEFAULT_CADENCE_MS = 500


@dataclass(frozen=True)
class LobSnapshot:
    timestamp: int
    bids: tuple
    asks: tuple
    last_trade: tuple | None = None

    @property
    def best_bid(self):
        return self.bids[0][0]

    @property
    def best_ask(self):
        return self.asks[0][0]

    @property
    def mid(self):
        return 0.5 * (self.best_bid + self.best_ask)

    @property
    def spread(self):
        return self.best_ask - self.best_bid


def _on_tick(prices, tick):
    q = prices / tick
    return np.abs(q - np.round(q)) < 1e-6


def book_violations(bid_px, bid_vol, ask_px, ask_vol, trade_px, trade_vol, tick_size):
    """Return ``(row, reason)`` for every row breaking a snapshot invariant."""
    bad = {}

    def flag(mask, reason):
        for i in np.flatnonzero(mask):
            bad.setdefault(int(i), reason)

    arrays = np.concatenate([bid_px, bid_vol, ask_px, ask_vol], axis=1)
    flag(~np.all(np.isfinite(arrays), axis=1), "non-finite book value")
    with np.errstate(invalid="ignore"):
        flag(~np.all(np.diff(bid_px, axis=1) < 0, axis=1), "bid prices not strictly decreasing")
        flag(~np.all(np.diff(ask_px, axis=1) > 0, axis=1), "ask prices not strictly increasing")
        flag(~(ask_px[:, 0] > bid_px[:, 0]), "best ask not above best bid")
        flag(~np.all((bid_vol > 0) & (ask_vol > 0), axis=1), "non-positive volume")
        flag(~np.all((bid_px > 0) & (ask_px > 0), axis=1), "non-positive price")
        flag(~np.all(_on_tick(bid_px, tick_size) & _on_tick(ask_px, tick_size), axis=1),
             "price not a multiple of the tick size")
        has_trade = np.isfinite(trade_px)
        flag(has_trade & ~(np.isfinite(trade_vol) & (trade_vol > 0)), "trade without positive volume")
        flag(has_trade & ~((trade_px > 0) & _on_tick(np.where(has_trade, trade_px, tick_size), tick_size)),
             "trade price not a positive tick multiple")
        flag(~has_trade & np.isfinite(trade_vol) & (trade_vol != 0), "trade volume without trade price")
    return sorted(bad.items())


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class MarketSeries:
    """Time-ordered book snapshots at a fixed cadence, stored column-wise.

    Missing trades are NaN in ``trade_px``/``trade_vol``. ``labels`` is an
    optional per-snapshot scenario tag (the synthetic generator fills it
    with the regime name).
    """

    def __init__(self, timestamps, bid_px, bid_vol, ask_px, ask_vol, trade_px=None, trade_vol=None,
                 tick_size=1.0, cadence=None, labels=None, validate=True):
        n = len(timestamps)
        self.timestamps = _frozen(timestamps, np.int64)
        self.bid_px = _frozen(bid_px).reshape(n, DEPTH)
        self.bid_vol = _frozen(bid_vol).reshape(n, DEPTH)
        self.ask_px = _frozen(ask_px).reshape(n, DEPTH)
        self.ask_vol = _frozen(ask_vol).reshape(n, DEPTH)
        self.trade_px = _frozen(np.full(n, np.nan) if trade_px is None else trade_px)
        self.trade_vol = _frozen(np.full(n, np.nan) if trade_vol is None else trade_vol)
        self.tick_size = float(tick_size)
        if cadence is None:
            cadence = int(self.timestamps[1] - self.timestamps[0]) if n > 1 else DEFAULT_CADENCE_MS
        self.cadence = int(cadence)
        self.labels = None if labels is None else tuple(labels)
        if validate:
            self.validate()

    def validate(self):
        n = len(self)
        if n == 0:
            raise DataError("empty market series")
        if self.tick_size <= 0:
            raise DataError("tick size must be positive")
        diffs = np.diff(self.timestamps)
        if np.any(diffs <= 0):
            rows = (np.flatnonzero(diffs <= 0) + 1).tolist()
            raise DataError(f"timestamps not strictly increasing at rows {rows[:10]}", rows)
        if np.any(diffs != self.cadence):
            rows = (np.flatnonzero(diffs != self.cadence) + 1).tolist()
            raise DataError(f"timestamp spacing differs from cadence {self.cadence} ms at rows {rows[:10]}", rows)
        bad = book_violations(self.bid_px, self.bid_vol, self.ask_px, self.ask_vol,
                              self.trade_px, self.trade_vol, self.tick_size)
        if bad:
            rows = [r for r, _ in bad]
            detail = "; ".join(f"row {r}: {why}" for r, why in bad[:10])
            raise DataError(f"{len(bad)} invalid snapshot(s): {detail}", rows)
        if self.labels is not None and len(self.labels) != n:
            raise DataError("labels length does not match series length")

    def __len__(self):
        return len(self.timestamps)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return MarketSeries(self.timestamps[i], self.bid_px[i], self.bid_vol[i], self.ask_px[i],
                                self.ask_vol[i], self.trade_px[i], self.trade_vol[i], self.tick_size,
                                self.cadence, None if self.labels is None else self.labels[i], validate=False)
        trade = None
        if np.isfinite(self.trade_px[i]):
            trade = (float(self.trade_px[i]), float(self.trade_vol[i]))
        return LobSnapshot(int(self.timestamps[i]),
                           tuple(zip(self.bid_px[i].tolist(), self.bid_vol[i].tolist())),
                           tuple(zip(self.ask_px[i].tolist(), self.ask_vol[i].tolist())), trade)

    @classmethod
    def from_snapshots(cls, snapshots, tick_size, cadence=None):
        snapshots = list(snapshots)
        trade_px = [np.nan if s.last_trade is None else s.last_trade[0] for s in snapshots]
        trade_vol = [np.nan if s.last_trade is None else s.last_trade[1] for s in snapshots]
        return cls([s.timestamp for s in snapshots],
                   [[p for p, _ in s.bids] for s in snapshots], [[v for _, v in s.bids] for s in snapshots],
                   [[p for p, _ in s.asks] for s in snapshots], [[v for _, v in s.asks] for s in snapshots],
                   trade_px, trade_vol, tick_size, cadence)

    @property
    def mid(self):
        return 0.5 * (self.bid_px[:, 0] + self.ask_px[:, 0])

    @property
    def spread(self):
        return self.ask_px[:, 0] - self.bid_px[:, 0]

    @property
    def depth_volume(self):
        """Total resting volume over all ten levels."""
        return self.bid_vol.sum(axis=1) + self.ask_vol.sum(axis=1)

    def equals(self, other):
        cols = ("timestamps", "bid_px", "bid_vol", "ask_px", "ask_vol")
        return (len(self) == len(other) and self.tick_size == other.tick_size
                and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in cols)
                and np.array_equal(self.trade_px, other.trade_px, equal_nan=True)
                and np.array_equal(self.trade_vol, other.trade_vol, equal_nan=True))
