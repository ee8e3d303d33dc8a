"""Market-making episodes, metrics and experiment protocols."""

from .engine import EpisodeResult, EpisodeState, Fill, episode_windows, match_ladder, run_episode, step
from .metrics import EPNL_DISPLAY_SCALE, MetricsReport, compute_metrics
from .policies import FusedPolicy, MidFollowerPolicy, Policy, SingleExpertPolicy, TeacherPolicy
from .protocols import (EXTREME_SCENARIOS, LONG_RUN_SCENARIOS, ModelBundle, ProtocolConfig, ProtocolReport,
                        evaluate_policies, latency_stats, low_data_subset, run_extreme, run_latency, run_long_run,
                        run_low_data, run_protocols, slice_size, time_decisions)

__all__ = [
    "EPNL_DISPLAY_SCALE", "EXTREME_SCENARIOS", "EpisodeResult", "EpisodeState", "Fill", "FusedPolicy",
    "LONG_RUN_SCENARIOS", "MetricsReport", "MidFollowerPolicy", "ModelBundle", "Policy", "ProtocolConfig",
    "ProtocolReport", "SingleExpertPolicy", "TeacherPolicy", "compute_metrics", "episode_windows",
    "evaluate_policies", "latency_stats", "low_data_subset", "match_ladder", "run_episode", "run_extreme",
    "run_latency", "run_long_run", "run_low_data", "run_protocols", "slice_size", "step", "time_decisions",
]
