"""Experiment protocols: extreme markets, long runs, low data and latency.

Every protocol returns a :class:`ProtocolReport`, a flat table whose rows
carry the metric set of :class:`~cmm.backtest.metrics.MetricsReport` and
which writes itself as CSV plus a plain-text summary.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, DependencyError
from ..lobsim import generate_synthetic
from ..teacher import raw_windows
from .engine import episode_windows, run_episode
from .metrics import compute_metrics
from .policies import FusedPolicy, MidFollowerPolicy, SingleExpertPolicy, TeacherPolicy

log = logging.getLogger(__name__)

EXTREME_SCENARIOS = {
    "flash_crash": (("medium", 2000), ("flash_crash", 1200), ("medium", 800)),
    "reversal": (("medium", 2000), ("reversal", 1200), ("medium", 800)),
}
LONG_RUN_SCENARIOS = {
    "bull": (("medium", 500), ("bull", 5500)),
    "bear": (("medium", 500), ("bear", 5500)),
    "sideways": (("medium", 500), ("sideways", 5500)),
}
METRIC_COLUMNS = ("epnl", "epnl_std", "map", "map_std", "pnlmap", "rpt", "sharpe", "n_trades", "n_episodes",
                  "avg_spread")


@dataclass
class ProtocolConfig:
    """Backtest settings shared by every protocol.

    Scenario series are drawn with seed ``seed + scenario_seed_offset`` so
    they never coincide with the training series.
    """

    episode_length: int = 200
    fee_rate: float = 0.0
    volume_slope: float = 0.0
    seed: int = 0
    scenario_seed_offset: int = 1000
    extreme: bool = True
    long_run: bool = True
    low_data: bool = True
    latency: bool = True
    low_data_fractions: tuple = (0.1, 0.2, 0.5)
    single_expert_regime: str = "medium"
    latency_decisions: int = 1000
    latency_warmup: int = 50

    def validate(self):
        if self.episode_length < 2:
            raise ConfigurationError("episode_length must be >= 2")
        if self.fee_rate < 0:
            raise ConfigurationError("fee_rate must be >= 0")
        if not all(0 < f <= 1 for f in self.low_data_fractions):
            raise ConfigurationError("low_data_fractions must lie in (0, 1]")
        if self.latency_decisions < 1000:
            raise ConfigurationError("latency_decisions must be >= 1000")
        if self.latency_warmup < 0:
            raise ConfigurationError("latency_warmup must be >= 0")
        return self

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "low_data_fractions" in d:
            d["low_data_fractions"] = tuple(d["low_data_fractions"])
        return cls(**d).validate()


@dataclass
class ProtocolReport:
    name: str
    columns: tuple
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_cell(row.get(c)) for c in self.columns])
        return buf.getvalue()

    def write(self, stem):
        """Write ``stem.csv`` and ``stem.txt``."""
        with open(f"{stem}.csv", "w", newline="") as fh:
            fh.write(self.to_csv())
        with open(f"{stem}.txt", "w") as fh:
            fh.write(self.to_text())

    def to_text(self):
        widths = [max(len(c), *(len(_cell(r.get(c))) for r in self.rows)) if self.rows else len(c)
                  for c in self.columns]
        lines = [f"# {self.name}", "  ".join(c.ljust(w) for c, w in zip(self.columns, widths))]
        lines += ["  ".join(_cell(r.get(c)).ljust(w) for c, w in zip(self.columns, widths)) for r in self.rows]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def _cell(v):
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


@dataclass
class ModelBundle:
    """Trained artifacts the protocols need.

    ``retrain`` rebuilds (experts, kernel) from a fraction of the training
    data; only the low-data protocol uses it.
    """

    teacher: object
    ensemble: object
    experts: list
    retrain: object = None

    def require(self):
        missing = [n for n in ("teacher", "ensemble", "experts") if getattr(self, n) is None]
        if missing:
            raise DependencyError(f"backtest needs trained {', '.join(missing)}")


def policies_for(bundle, cfg):
    return [TeacherPolicy(bundle.teacher), FusedPolicy(bundle.ensemble),
            SingleExpertPolicy(bundle.experts, cfg.single_expert_regime), MidFollowerPolicy()]


def evaluate_policies(policies, series, start, stop, cfg):
    """Metrics of every policy over consecutive episodes inside ``[start, stop)``."""
    windows = episode_windows(start, stop, cfg.episode_length)
    if not windows:
        raise ConfigurationError(f"no episode of length {cfg.episode_length} fits [{start}, {stop})")
    out = {}
    for pol in policies:
        eps = [run_episode(pol, series, a, b, cfg.volume_slope, cfg.fee_rate) for a, b in windows]
        out[pol.name] = (compute_metrics(eps), eps)
    return out


def _segment(series, label):
    idx = [i for i, lab in enumerate(series.labels) if lab == label]
    return idx[0], idx[-1] + 1


def _rows(scenario, results):
    rows = []
    for name, (m, _) in results.items():
        row = {"scenario": scenario, "policy": name}
        row.update({c: getattr(m, c) for c in METRIC_COLUMNS})
        rows.append(row)
    return rows


def scenario_series(cfg, scenarios, label, history):
    """The series of one scenario and the ``[start, stop)`` of its stressed segment."""
    k = sorted(scenarios).index(label)
    schedule = scenarios[label]
    series = generate_synthetic(cfg.seed + cfg.scenario_seed_offset + k, sum(n for _, n in schedule), schedule)
    start, stop = _segment(series, label)
    return series, max(start, history), stop


def _scenario_runs(bundle, cfg, scenarios, history):
    rows = []
    for label in sorted(scenarios):
        series, start, stop = scenario_series(cfg, scenarios, label, history)
        res = evaluate_policies(policies_for(bundle, cfg), series, start, stop, cfg)
        rows.extend(_rows(label, res))
    return rows


def run_extreme(bundle, cfg):
    bundle.require()
    rows = _scenario_runs(bundle, cfg, EXTREME_SCENARIOS, bundle.teacher.config.history_len)
    return ProtocolReport("extreme-market", ("scenario", "policy") + METRIC_COLUMNS, rows,
                          ["episodes cover the stressed segment only",
                           "rpt divides by the mean top-of-book spread of each episode"])


def run_long_run(bundle, cfg):
    bundle.require()
    rows = _scenario_runs(bundle, cfg, LONG_RUN_SCENARIOS, bundle.teacher.config.history_len)
    return ProtocolReport("long-run", ("scenario", "policy") + METRIC_COLUMNS, rows)


def slice_size(n, fraction):
    return int(math.floor(fraction * n))


def low_data_subset(indices, fraction, seed):
    """Seeded subset of exactly ``floor(fraction * len(indices))`` sorted indices."""
    indices = np.asarray(indices)
    k = slice_size(len(indices), fraction)
    if k < 1:
        raise ConfigurationError(f"fraction {fraction} leaves no samples out of {len(indices)}")
    pick = np.random.default_rng([seed, int(round(fraction * 1000))]).choice(len(indices), k, replace=False)
    return np.sort(indices[pick])


def run_low_data(bundle, cfg):
    """Retrain experts and kernel on data fractions and backtest each ensemble."""
    bundle.require()
    if bundle.retrain is None:
        raise DependencyError("low-data protocol needs a retrain callback")
    schedule = (("low", 2000), ("high", 2000), ("medium", 2000))
    series = generate_synthetic(cfg.seed + cfg.scenario_seed_offset + 99, 6000, schedule)
    history = bundle.teacher.config.history_len
    rows = []
    for frac in tuple(cfg.low_data_fractions) + (1.0,):
        if frac == 1.0:
            ensemble, n_used = bundle.ensemble, None
        else:
            ensemble, n_used = bundle.retrain(frac)
        res = evaluate_policies([FusedPolicy(ensemble)], series, history, len(series), cfg)
        for row in _rows("mixed", res):
            row.update(fraction=frac, n_train=n_used)
            rows.append(row)
    return ProtocolReport("low-data", ("fraction", "n_train", "policy") + METRIC_COLUMNS, rows,
                          ["fraction 1.0 is the full-data ensemble"])


def time_decisions(decide, windows, ref_mids, warmup):
    """Per-call wall-clock seconds of ``decide(window, ref_mid)``."""
    for i in range(min(warmup, len(windows))):
        decide(windows[i], ref_mids[i])
    out = np.empty(len(windows))
    clock = time.perf_counter
    for i, (w, r) in enumerate(zip(windows, ref_mids)):
        t0 = clock()
        decide(w, r)
        out[i] = clock() - t0
    return out


def latency_stats(seconds):
    return {"mean": float(np.mean(seconds)), "p99": float(np.quantile(seconds, 0.99)),
            "throughput": float(1.0 / np.mean(seconds)), "n": int(len(seconds))}


def run_latency(bundle, cfg):
    """Single-decision wall clock for teacher and fused ensemble on identical inputs."""
    bundle.require()
    teacher, ensemble = bundle.teacher, bundle.ensemble
    history = teacher.config.history_len
    n = cfg.latency_decisions
    series = generate_synthetic(cfg.seed + cfg.scenario_seed_offset + 7, n + history + 1)
    idx = np.arange(history, history + n)
    x = teacher.normalization.inputs(raw_windows(series, idx, history))
    refs = series.mid[idx]
    tp, fp = TeacherPolicy(teacher), FusedPolicy(ensemble)
    flat = x.reshape(n, -1)
    t_sec = time_decisions(tp.decide, flat, refs, cfg.latency_warmup)
    f_sec = time_decisions(fp.decide, flat, refs, cfg.latency_warmup)
    rows = []
    for name, sec in (("teacher", t_sec), ("fused", f_sec)):
        s = latency_stats(sec)
        rows.append({"policy": name, "mean_s": s["mean"], "p99_s": s["p99"], "decisions_per_s": s["throughput"],
                     "n": s["n"]})
    ratio = rows[0]["mean_s"] / rows[1]["mean_s"]
    return ProtocolReport("latency", ("policy", "mean_s", "p99_s", "decisions_per_s", "n"), rows,
                          [f"teacher/fused mean latency ratio {ratio:.3g}", "single process, warm cache"])


def run_protocols(bundle, cfg=None):
    """Every enabled protocol, keyed by report name."""
    cfg = (cfg or ProtocolConfig()).validate()
    bundle.require()
    reports = {}
    for flag, fn in (("extreme", run_extreme), ("long_run", run_long_run), ("low_data", run_low_data),
                     ("latency", run_latency)):
        if getattr(cfg, flag):
            log.info("protocol %s", flag)
            rep = fn(bundle, cfg)
            reports[rep.name] = rep
    return reports
