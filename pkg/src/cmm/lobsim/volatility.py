"""Trailing realized volatility and low/medium/high banding."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..errors import DataError

log = logging.getLogger(__name__)

BAND_NAMES = ("low", "medium", "high")
LOW, MEDIUM, HIGH = 0, 1, 2
DEFAULT_VOL_WINDOW = 2000


def _mids(series_or_mids):
    return series_or_mids.mid if hasattr(series_or_mids, "mid") else np.asarray(series_or_mids, dtype=float)


def realized_volatility(series, index, window):
    """Population std of the ``window`` log mid returns ending at ``index``."""
    mids = _mids(series)
    if window < 1:
        raise DataError("window must be >= 1")
    if index < window or index >= len(mids):
        raise DataError(f"index {index} needs {window} snapshots of history (series length {len(mids)})")
    return float(np.std(np.diff(np.log(mids[index - window:index + 1]))))


def rolling_volatility(series, window):
    """Realized volatility at every index; NaN where history is too short."""
    mids = _mids(series)
    r = np.diff(np.log(mids))
    out = np.full(len(mids), np.nan)
    if len(r) < window:
        return out
    # centre before the running sums to keep cancellation error far below 1e-12 relative
    r = r - r.mean()
    c1 = np.concatenate([[0.0], np.cumsum(r)])
    c2 = np.concatenate([[0.0], np.cumsum(r * r)])
    s1 = c1[window:] - c1[:-window]
    s2 = c2[window:] - c2[:-window]
    var = np.maximum(s2 / window - (s1 / window) ** 2, 0.0)
    out[window:] = np.sqrt(var)
    return out


@dataclass(frozen=True)
class VolatilityBand:
    label: str
    thresholds: tuple

    def __post_init__(self):
        if self.label not in BAND_NAMES:
            raise ValueError(f"unknown band {self.label!r}")


@dataclass
class Banding:
    """Per-sample band codes (0 low, 1 medium, 2 high) and the cut points.

    ``indices`` are the series positions that carry a label (those with a
    full volatility window); ``degenerate`` flags an all-equal distribution.
    """

    indices: np.ndarray
    volatility: np.ndarray
    codes: np.ndarray
    thresholds: tuple
    degenerate: bool = False

    def names(self):
        return [BAND_NAMES[c] for c in self.codes]

    def label_for(self, index):
        pos = np.searchsorted(self.indices, index)
        if pos >= len(self.indices) or self.indices[pos] != index:
            raise DataError(f"index {index} has no volatility label")
        return VolatilityBand(BAND_NAMES[self.codes[pos]], self.thresholds)

    def counts(self):
        return np.bincount(self.codes, minlength=3)


def tertile_thresholds(values):
    """Equal-mass cut points ``(t_low, t_high)`` with ``t_low < t_high``.

    ``v <= t_low`` is low, ``t_low < v <= t_high`` medium, the rest high.
    With at least three distinct values the cuts are pulled inward so that
    every class is non-empty. Returns ``None`` when all values are equal.
    """
    v = np.sort(np.asarray(values, dtype=float))
    n = len(v)
    if n == 0:
        raise DataError("no volatility observations to band")
    uniq = np.unique(v)
    if len(uniq) == 1:
        return None
    t_low = v[math.ceil(n / 3) - 1]
    t_high = v[math.ceil(2 * n / 3) - 1]
    if len(uniq) >= 3:
        t_low = min(t_low, uniq[-3])
        t_high = min(t_high, uniq[-2])
    if t_high <= t_low:
        above = uniq[uniq > t_low]
        if len(above) > 1 or (len(above) == 1 and len(uniq) < 3):
            t_high = above[0]
        else:
            t_low = uniq[uniq < t_high][-1]
    return float(t_low), float(t_high)


def assign_bands(values, thresholds):
    values = np.asarray(values, dtype=float)
    if thresholds is None:
        return np.full(len(values), MEDIUM, dtype=np.int64)
    t_low, t_high = thresholds
    return np.where(values <= t_low, LOW, np.where(values <= t_high, MEDIUM, HIGH)).astype(np.int64)


def band_values(values):
    """Band raw volatility values; returns ``(codes, thresholds, degenerate)``."""
    thresholds = tertile_thresholds(values)
    degenerate = thresholds is None
    if degenerate:
        log.warning("degenerate volatility distribution: every sample labelled medium")
    return assign_bands(values, thresholds), thresholds, degenerate


def band_dataset(series, window=DEFAULT_VOL_WINDOW, thresholds=None, fit_indices=None):
    """Label every index with a full window as low/medium/high volatility.

    Thresholds are the empirical tertiles of the realized volatilities at
    ``fit_indices`` (all labelled indices by default) unless ``thresholds``
    is given, which lets a held-out split reuse training cut points.
    """
    vol = rolling_volatility(series, window)
    indices = np.flatnonzero(np.isfinite(vol))
    if len(indices) < 3:
        raise DataError(f"need at least 3 volatility observations, series gives {len(indices)}")
    values = vol[indices]
    degenerate = False
    if thresholds is None:
        fit = values if fit_indices is None else vol[np.asarray(fit_indices)]
        if np.any(~np.isfinite(fit)):
            raise DataError("fit indices include positions without a full volatility window")
        thresholds = tertile_thresholds(fit)
        degenerate = thresholds is None
        if degenerate:
            log.warning("degenerate volatility distribution: every sample labelled medium")
    codes = assign_bands(values, thresholds)
    return Banding(indices, values, codes, thresholds, degenerate)
