"""Seeded synthetic five-level book generator with a regime schedule.

The latent log mid-price is a random walk whose step size is scaled by the
active regime's volatility multiplier. Three weak but learnable structures
are planted so that prediction tasks are not degenerate:

* the next return leans in the direction of the top-of-book imbalance,
* the spread in ticks is sticky: each step it keeps its value with
  probability ``spread_stickiness`` and is otherwise redrawn as
  ``1 + Poisson(lambda_t)``, ``lambda_t`` a smoothed function of the volatility
  multiplier (spreads widen in turbulent regimes),
* level volumes follow a persistent log-AR(1) around a regime-dependent mean
  (depth thins out when volatility is high).

Prices are placed on the tick grid symmetrically around the latent mid, so a
zero-volatility regime produces a constant mid-price.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from ..errors import ConfigurationError
from .book import DEPTH, MarketSeries


@dataclass(frozen=True)
class Regime:
    """Dynamics of one schedule segment.

    ``drift`` and ``reversal`` are per-step log drifts in units of the base
    sigma. ``crash_k`` > 0 makes the segment a flash crash: a run of
    ``-crash_k * sigma`` jumps over its first quarter followed by a full
    recovery over the next half.
    """

    name: str
    vol_mult: float = 1.0
    drift: float = 0.0
    crash_k: float = 0.0
    reversal: float = 0.0


REGIMES = {
    "zero": Regime("zero", 0.0),
    "low": Regime("low", 0.5),
    "medium": Regime("medium", 1.0),
    "high": Regime("high", 2.0),
    "flash_crash": Regime("flash_crash", 2.0, crash_k=10.0),
    "reversal": Regime("reversal", 1.5, reversal=0.5),
    "bull": Regime("bull", 1.0, drift=0.05),
    "bear": Regime("bear", 1.0, drift=-0.05),
    "sideways": Regime("sideways", 0.75),
}

DEFAULT_SCHEDULE = (("low", 4000), ("high", 4000), ("medium", 4000), ("high", 4000), ("low", 4000),
                    ("medium", 4000))


@dataclass(frozen=True)
class SyntheticConfig:
    start_price: float = 5000.0
    tick_size: float = 1.0
    cadence_ms: int = 500
    start_ms: int = 1_625_097_600_000
    sigma: float = 3e-4
    imbalance_coef: float = 3.0
    spread_intensity: float = 0.8
    spread_persistence: float = 0.99
    spread_stickiness: float = 0.85
    depth_mean: float = 40.0
    depth_profile: tuple = (1.0, 1.2, 1.4, 1.6, 1.8)
    depth_persistence: float = 0.95
    depth_noise: float = 0.3
    depth_regime_persistence: float = 0.995
    trade_prob: float = 0.4
    trade_size: float = 3.0
    regimes: dict = field(default_factory=lambda: dict(REGIMES))

    def __post_init__(self):
        if self.start_price <= 0 or self.tick_size <= 0 or self.cadence_ms <= 0:
            raise ConfigurationError("start price, tick size and cadence must be positive")
        if self.sigma < 0 or self.depth_mean < 1 or self.trade_size < 0:
            raise ConfigurationError("sigma >= 0, depth_mean >= 1 and trade_size >= 0 required")
        for name in ("spread_persistence", "spread_stickiness", "depth_persistence", "depth_regime_persistence"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must lie in [0, 1)")
        if not 0 <= self.trade_prob <= 1:
            raise ConfigurationError("trade_prob must lie in [0, 1]")
        if len(self.depth_profile) != DEPTH:
            raise ConfigurationError(f"depth_profile needs {DEPTH} entries")


def expand_schedule(schedule, n_steps, regimes):
    """Per-step list of (regime, position within segment, segment length)."""
    if not schedule:
        raise ConfigurationError("regime schedule is empty")
    steps = []
    segments = [(regimes[name] if isinstance(name, str) else name, int(length)) for name, length in schedule]
    for reg, length in segments:
        if length < 1:
            raise ConfigurationError("schedule segment lengths must be >= 1")
    while len(steps) < n_steps:
        for reg, length in segments:
            steps.extend((reg, j, length) for j in range(length))
            if len(steps) >= n_steps:
                break
    return steps[:n_steps]


def _resolve(schedule, regimes):
    out = []
    for name, length in schedule:
        if isinstance(name, str) and name not in regimes:
            raise ConfigurationError(f"unknown regime {name!r}; known: {sorted(regimes)}")
        out.append((name, length))
    return out


def generate_synthetic(seed, n_steps, schedule=DEFAULT_SCHEDULE, config=None):
    """Generate a validated :class:`MarketSeries` of ``n_steps`` snapshots.

    The schedule is a sequence of ``(regime name or Regime, length)`` pairs,
    repeated cyclically until ``n_steps`` is reached. ``series.labels`` holds
    the regime name of every step. Same seed, schedule and config give a
    bit-identical series.
    """
    if int(n_steps) < 1:
        raise ConfigurationError("n_steps must be >= 1")
    n = int(n_steps)
    cfg = config or SyntheticConfig()
    steps = expand_schedule(_resolve(schedule, cfg.regimes), n, cfg.regimes)
    rng = np.random.default_rng(seed)

    vol_mult = np.array([r.vol_mult for r, _, _ in steps])
    drift = np.empty(n)
    jump = np.zeros(n)
    for t, (reg, j, length) in enumerate(steps):
        d = reg.drift
        if reg.reversal:
            d += reg.reversal if j < length // 2 else -reg.reversal
        drift[t] = d
        if reg.crash_k:
            drop = max(1, length // 4)
            if j < drop:
                jump[t] = -reg.crash_k
            elif j < 3 * drop:
                jump[t] = reg.crash_k / 2.0

    # depth: regime mean smoothed over time, per-level persistent log noise
    target = cfg.depth_mean / (1.0 + vol_mult)
    rho_m = cfg.depth_regime_persistence
    depth_level = lfilter([1 - rho_m], [1, -rho_m], target, zi=[rho_m * target[0]])[0]
    rho = cfg.depth_persistence
    innov = rng.standard_normal((2 * DEPTH, n)) * cfg.depth_noise * np.sqrt(1 - rho ** 2)
    u0 = rng.standard_normal(2 * DEPTH) * cfg.depth_noise
    u = lfilter([1.0], [1, -rho], innov, axis=1, zi=(rho * u0)[:, None])[0]
    profile = np.tile(np.asarray(cfg.depth_profile), 2)[:, None]
    vols = np.maximum(1.0, np.round(depth_level[None, :] * profile * np.exp(u))).T
    bid_vol, ask_vol = vols[:, :DEPTH], vols[:, DEPTH:]

    # spread in ticks
    rho_s = cfg.spread_persistence
    lam_target = cfg.spread_intensity * vol_mult
    lam = lfilter([1 - rho_s], [1, -rho_s], lam_target, zi=[rho_s * lam_target[0]])[0]
    fresh = 1 + rng.poisson(np.maximum(lam, 0.0))
    redraw = rng.random(n) >= cfg.spread_stickiness
    redraw[0] = True
    # carry the last redrawn value forward
    spread_ticks = fresh[np.maximum.accumulate(np.where(redraw, np.arange(n), 0))]

    # latent log mid with imbalance lean
    imbalance = (bid_vol[:, 0] - ask_vol[:, 0]) / (bid_vol[:, 0] + ask_vol[:, 0])
    lean = np.concatenate([[0.0], imbalance[:-1]])
    z = rng.standard_normal(n)
    z[0] = 0.0
    ret = cfg.sigma * (vol_mult * (drift + cfg.imbalance_coef * lean + z) + jump)
    ret[0] = 0.0
    q = np.exp(np.log(cfg.start_price) + np.cumsum(ret)) / cfg.tick_size
    bid_ticks = np.floor(q - spread_ticks / 2.0 + 0.5).astype(np.int64)
    if np.any(bid_ticks - (DEPTH - 1) < 1):
        raise ConfigurationError("price path reached zero; lower sigma or crash size")
    ask_ticks = bid_ticks + spread_ticks
    offs = np.arange(DEPTH)
    bid_px = (bid_ticks[:, None] - offs) * cfg.tick_size
    ask_px = (ask_ticks[:, None] + offs) * cfg.tick_size

    # trades: last print of the interval, at the touch on the side the price moved
    p_trade = np.minimum(0.95, cfg.trade_prob * (0.5 + 0.5 * vol_mult))
    has_trade = rng.random(n) < p_trade
    coin = rng.random(n) < 0.5
    sell = np.where(ret < 0, True, np.where(ret > 0, False, coin))
    trade_px = np.where(sell, bid_px[:, 0], ask_px[:, 0])
    trade_vol = 1.0 + rng.poisson(cfg.trade_size, n)
    trade_px = np.where(has_trade, trade_px, np.nan)
    trade_vol = np.where(has_trade, trade_vol, np.nan)

    ts = cfg.start_ms + cfg.cadence_ms * np.arange(n, dtype=np.int64)
    labels = [r.name for r, _, _ in steps]
    return MarketSeries(ts, bid_px, bid_vol, ask_px, ask_vol, trade_px, trade_vol,
                        cfg.tick_size, cfg.cadence_ms, labels)
