"""End-to-end stages shared by the CLI, the demos and the acceptance suite.

Every random choice is seeded from one root seed through :func:`sub_seed`,
so two stages never draw from the same stream.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import hajek, ofdd
from .errors import ConfigurationError
from .lobsim import DEFAULT_SCHEDULE, band_dataset, generate_synthetic, ingest_csv, interleaved_split
from .probe import ProbeConfig, probe_teacher
from .teacher import TASKS, TeacherConfig, make_dataset, train_teacher

log = logging.getLogger(__name__)


def sub_seed(root, name):
    """Deterministic 32-bit seed for the stream called ``name``."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


@dataclass
class DataConfig:
    """Where the market series comes from and how it is split.

    ``seed`` is the root seed of the whole run.
    """

    source: str = "synthetic"
    seed: int = 0
    n_steps: int = 24000
    schedule: tuple = DEFAULT_SCHEDULE
    csv_path: str | None = None
    tick_size: float = 1.0
    vol_window: int = 2000
    split_block: int = 500
    split_gap: int = 8

    def validate(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigurationError("data.source must be 'synthetic' or 'csv'")
        if self.source == "csv" and not self.csv_path:
            raise ConfigurationError("data.csv_path is required when data.source = 'csv'")
        if self.n_steps < 1 or self.tick_size <= 0 or self.vol_window < 2:
            raise ConfigurationError("data sizes must be positive and vol_window >= 2")
        if self.split_block < 1 or self.split_gap < 0:
            raise ConfigurationError("split_block >= 1 and split_gap >= 0 required")
        for entry in self.schedule:
            if len(entry) != 2:
                raise ConfigurationError(f"schedule entries are (regime, length) pairs, got {entry!r}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["schedule"] = [list(e) for e in self.schedule]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "schedule" in d:
            d["schedule"] = tuple((str(n), int(k)) for n, k in d["schedule"])
        return cls(**d).validate()


def load_series(cfg):
    cfg.validate()
    if cfg.source == "csv":
        return ingest_csv(cfg.csv_path, cfg.tick_size)
    return generate_synthetic(sub_seed(cfg.seed, "data"), cfg.n_steps, cfg.schedule)


@dataclass
class Prepared:
    series: object
    splits: dict
    banding: object
    data: DataConfig


def prepare(series, cfg, history_len):
    """Interleaved train/kernel/test splits and train-fitted volatility bands."""
    first = max(cfg.vol_window, history_len)
    usable = np.arange(first, len(series) - 1)
    splits = interleaved_split(usable, cfg.split_block, gap=cfg.split_gap)
    banding = band_dataset(series, cfg.vol_window, fit_indices=splits["train"])
    return Prepared(series, splits, banding, cfg)


def fit_teacher(prep, cfg, root):
    return train_teacher(prep.series, cfg, seed=sub_seed(root, "teacher"), indices=prep.splits["train"])


def target_sets(teacher, prep, taps=None):
    """Teacher targets for every split."""
    taps = tuple(sorted(set(taps or teacher.taps.values())))
    h = teacher.config.history_len
    return {name: ofdd.teacher_targets(teacher, make_dataset(prep.series, idx, h, teacher.normalization), taps)
            for name, idx in prep.splits.items()}


def eval_inputs(teacher, prep, n):
    idx = prep.splits["test"][:n]
    return make_dataset(prep.series, idx, teacher.config.history_len, teacher.normalization).inputs


def run_probe_stage(teacher, prep, cfg, root):
    cfg = replace(cfg, seed=sub_seed(root, "probe")).validate()
    return probe_teacher(teacher, eval_inputs(teacher, prep, cfg.eval_batch), cfg)


def distill_config(cfg, root):
    return replace(cfg, seed=sub_seed(root, "distill")).validate()


def fusion_config(cfg, root):
    return replace(cfg, seed=sub_seed(root, "fusion")).validate()


@dataclass
class Distilled:
    experts: list
    curves: dict
    monolith: object = None
    monolith_curve: dict = field(default_factory=dict)


def run_distill(teacher, prep, targets, cfg, root, monolith=True, train_indices=None):
    """Train the expert grid and, optionally, the compute-matched monolith.

    The monolith gets as many SGD steps as the average expert, so both sides
    spend about the same training compute.
    """
    cfg = distill_config(cfg, root)
    train_idx = prep.splits["train"] if train_indices is None else train_indices
    specs = ofdd.build_expert_grid(teacher.config, full=cfg.grid == "full")
    experts, curves = ofdd.train_experts(specs, teacher, targets["train"], prep.banding, train_idx, cfg)
    out = Distilled(experts, curves)
    if monolith:
        steps = int(np.mean([c["steps"] for c in curves.values()]))
        out.monolith, out.monolith_curve = ofdd.monolithic_baseline(
            teacher, targets["train"], train_idx, cfg, ofdd.expert_budget(experts), max_steps=steps)
    return out


def fit_kernel(experts, targets, cfg, root, rows=None):
    """Kernel fitted so the fused prediction imitates the teacher on the kernel split."""
    t = targets["kernel"]
    x, z = (t.inputs, t.z) if rows is None else (t.inputs[rows], t.z[rows])
    return hajek.train_kernel(experts, x, z, fusion_config(cfg, root))


def _mse(pred, target):
    return ((np.asarray(pred) - np.asarray(target)) ** 2).mean(axis=0)


def evaluate(ensemble, monolith, targets, split="test"):
    """Held-out imitation and ground-truth errors.

    ``imitation_*`` compare with the teacher's normalized predictions,
    ``truth_*`` with the normalized ground truth; per-task best-single
    ratios divide the fused error by the best expert of that task.
    """
    t = targets[split]
    fz = ensemble.fuse_z(t.inputs)
    singles = {e.spec.key: e.predict(t.inputs)[0] for e in ensemble.experts}
    out = {"n": len(t.z), "imitation_fused": _mse(fz, t.z).tolist(), "truth_fused": _mse(fz, t.truth_z).tolist(),
           "truth_teacher": _mse(t.z, t.truth_z).tolist()}
    if monolith is not None:
        out["imitation_monolith"] = _mse(monolith.predict_z(t.inputs), t.z).tolist()
    ratios, best = {}, {}
    for k, task in enumerate(TASKS):
        errs = {e.spec.key: float(_mse(singles[e.spec.key], t.truth_z[:, k])) for e in ensemble.experts
                if e.spec.task == task}
        key = min(errs, key=errs.get)
        best[task] = {"expert": key, "truth_mse": errs[key]}
        ratios[task] = out["truth_fused"][k] / errs[key]
    out["best_single"] = best
    out["fused_over_best_single"] = ratios
    out["imitation_fused_mean"] = float(np.mean(out["imitation_fused"]))
    if monolith is not None:
        out["imitation_monolith_mean"] = float(np.mean(out["imitation_monolith"]))
    return out


def low_data_retrainer(teacher, prep, targets, distill_cfg, fusion_cfg, root):
    """Callback for the low-data protocol: ``fraction -> (ensemble, n_samples)``."""
    from .backtest.protocols import low_data_subset

    def retrain(fraction):
        idx = low_data_subset(prep.splits["train"], fraction, sub_seed(root, "low_data"))
        d = run_distill(teacher, prep, targets, distill_cfg, root, monolith=False, train_indices=idx)
        k_rows = np.sort(np.random.default_rng(sub_seed(root, "low_data_kernel")).choice(
            len(targets["kernel"].z), max(2, int(np.floor(fraction * len(targets["kernel"].z)))), replace=False))
        kernel, _ = fit_kernel(d.experts, targets, fusion_cfg, root, rows=k_rows)
        return hajek.Ensemble(d.experts, kernel, fusion_config(fusion_cfg, root)), len(idx)

    return retrain


@dataclass
class PipelineResult:
    prep: Prepared
    teacher: object
    targets: dict
    distilled: Distilled
    kernel: object
    ensemble: object
    evaluation: dict


def run_pipeline(data_cfg=None, teacher_cfg=None, distill_cfg=None, fusion_cfg=None, teacher=None):
    """Data, teacher, experts, monolith, kernel and held-out evaluation for one root seed."""
    data_cfg = (data_cfg or DataConfig()).validate()
    teacher_cfg = (teacher_cfg or TeacherConfig()).validate()
    distill_cfg = distill_cfg or ofdd.DistillConfig()
    fusion_cfg = fusion_cfg or hajek.FusionConfig()
    root = data_cfg.seed
    prep = prepare(load_series(data_cfg), data_cfg, teacher_cfg.history_len)
    if teacher is None:
        teacher, _ = fit_teacher(prep, teacher_cfg, root)
    targets = target_sets(teacher, prep)
    d = run_distill(teacher, prep, targets, distill_cfg, root)
    kernel, _ = fit_kernel(d.experts, targets, fusion_cfg, root)
    ens = hajek.Ensemble(d.experts, kernel, fusion_config(fusion_cfg, root))
    return PipelineResult(prep, teacher, targets, d, kernel, ens, evaluate(ens, d.monolith, targets))


__all__ = [
    "DataConfig", "Distilled", "PipelineResult", "Prepared", "ProbeConfig", "distill_config", "eval_inputs",
    "evaluate", "fit_kernel", "fit_teacher", "fusion_config", "load_series", "low_data_retrainer", "prepare",
    "run_distill", "run_pipeline", "run_probe_stage", "sub_seed", "target_sets",
]
