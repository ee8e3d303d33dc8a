"""Episode metrics: EPnL, MAP, PnLMAP, RPT and Sharpe.

Sums use ``math.fsum`` so every metric is exactly invariant to the order of
the episodes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from ..errors import DataError

EPNL_DISPLAY_SCALE = 1e3


def _mean(xs):
    xs = list(xs)
    return math.fsum(xs) / len(xs)


def _std(xs):
    xs = list(xs)
    m = _mean(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / len(xs))


@dataclass
class MetricsReport:
    """Aggregates over a batch of episodes; ``*_std`` is the spread across episodes.

    ``pnlmap`` is ``None`` when MAP is 0, ``rpt`` when there were no trades and
    ``sharpe`` when there is a single episode or zero PnL dispersion with a
    non-zero mean.
    """

    epnl: float
    epnl_std: float
    map: float
    map_std: float
    pnlmap: float | None
    rpt: float | None
    sharpe: float | None
    n_trades: float
    n_episodes: int
    avg_spread: float
    latency_mean: float | None = None
    latency_p99: float | None = None

    @property
    def epnl_display(self):
        return self.epnl / EPNL_DISPLAY_SCALE

    def to_dict(self):
        d = asdict(self)
        d["epnl_display"] = self.epnl_display
        return d


def compute_metrics(episodes, avg_spread=None, latency=None):
    """Metrics over ``episodes``.

    EPnL is the mean episode PnL and MAP the mean over episodes of each
    episode's mean absolute inventory. ``n_trades`` is the mean number of
    fills per episode and ``avg_spread`` defaults to the mean over episodes
    of each episode's mean top-of-book spread.
    """
    episodes = list(episodes)
    if not episodes:
        raise DataError("compute_metrics needs at least one episode")
    pnls = [e.pnl for e in episodes]
    maps = [e.mean_abs_inventory for e in episodes]
    epnl = _mean(pnls)
    mp = _mean(maps)
    trades = _mean(e.n_trades for e in episodes)
    spread = _mean(e.market_spread for e in episodes) if avg_spread is None else float(avg_spread)
    sd = _std(pnls)
    if sd > 0:
        sharpe = epnl / sd
    elif epnl == 0 and len(pnls) > 1:
        sharpe = 0.0
    else:
        sharpe = None
    return MetricsReport(
        epnl=epnl, epnl_std=sd, map=mp, map_std=_std(maps),
        pnlmap=epnl / mp if mp > 0 else None,
        rpt=epnl / (trades * spread) if trades > 0 and spread > 0 else None,
        sharpe=sharpe, n_trades=trades, n_episodes=len(episodes), avg_spread=spread,
        latency_mean=None if latency is None else latency["mean"],
        latency_p99=None if latency is None else latency["p99"])
