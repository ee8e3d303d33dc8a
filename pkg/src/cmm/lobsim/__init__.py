"""Order-book data model, CSV ingestion, synthetic markets, banding, ladders."""

from .book import DEFAULT_CADENCE_MS, DEPTH, LobSnapshot, MarketSeries
from .csvio import COLUMNS, ingest_csv, write_csv
from .ladder import QuoteLadder, build_ladder, level_volumes, round_to_tick
from .splits import DEFAULT_PATTERN, holdout_split, interleaved_split
from .synthetic import DEFAULT_SCHEDULE, REGIMES, Regime, SyntheticConfig, generate_synthetic
from .volatility import (BAND_NAMES, DEFAULT_VOL_WINDOW, Banding, VolatilityBand, assign_bands, band_dataset,
                         band_values, realized_volatility, rolling_volatility, tertile_thresholds)

__all__ = [
    "BAND_NAMES", "COLUMNS", "DEFAULT_PATTERN", "DEFAULT_CADENCE_MS", "DEFAULT_SCHEDULE", "DEFAULT_VOL_WINDOW", "DEPTH", "Banding",
    "LobSnapshot", "MarketSeries", "QuoteLadder", "REGIMES", "Regime", "SyntheticConfig", "VolatilityBand",
    "assign_bands", "band_dataset", "band_values", "build_ladder", "generate_synthetic", "holdout_split", "ingest_csv", "interleaved_split",
    "level_volumes", "realized_volatility", "rolling_volatility", "round_to_tick", "tertile_thresholds",
    "write_csv",
]
