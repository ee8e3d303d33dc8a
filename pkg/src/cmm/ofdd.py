"""Orthogonal feature decomposition distillation.

Teacher knowledge is split along layer band, task and volatility regime.
Every cell of the grid gets a small dense student trained on its regime
slice only, with a feature loss against the teacher's tapped layer and a
logit loss against the teacher's head for the cell's task.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, DivergenceError
from .lobsim.volatility import BAND_NAMES
from .netcore import autodiff as ad
from .netcore import layers
from .netcore.model import ForwardResult, LayeredModel, register_architecture, sgd_step
from .teacher import TASKS

log = logging.getLogger(__name__)

LAYER_BANDS = ("shallow", "middle", "deep")
REGIMES = BAND_NAMES
CANONICAL_PAIRS = {"shallow": "mid_price", "middle": "spread", "deep": "total_volume"}
BAND_OF_TASK = {t: b for b, t in CANONICAL_PAIRS.items()}
MAX_STUDENT_FRACTION = 1.0 / 20.0


@dataclass(frozen=True)
class ExpertSpec:
    layer_band: str
    task: str
    regime: str
    paired: bool

    def __post_init__(self):
        if self.layer_band not in LAYER_BANDS or self.task not in TASKS or self.regime not in REGIMES:
            raise ConfigurationError(f"invalid expert spec {self.layer_band}/{self.task}/{self.regime}")
        if self.paired != (CANONICAL_PAIRS[self.layer_band] == self.task):
            raise ConfigurationError(f"paired flag wrong for {self.layer_band}/{self.task}")

    @classmethod
    def make(cls, layer_band, task, regime):
        return cls(layer_band, task, regime, CANONICAL_PAIRS.get(layer_band) == task)

    @property
    def key(self):
        return f"{self.layer_band}-{self.task}-{self.regime}"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(d["layer_band"], d["task"], d["regime"], bool(d["paired"]))


@dataclass
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1.0
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    seed: int = 0
    band_taps: dict = field(default_factory=lambda: {"shallow": 2, "middle": 4, "deep": 6})
    hidden: int = 32
    grid: str = "paired"

    def validate(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigurationError("distillation weights need alpha >= 0, beta >= 0 and alpha + beta > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0 or self.hidden < 1:
            raise ConfigurationError("invalid distillation training settings")
        if set(self.band_taps) != set(LAYER_BANDS):
            raise ConfigurationError(f"band_taps must name exactly {LAYER_BANDS}")
        if self.grid not in ("paired", "full"):
            raise ConfigurationError("grid must be 'paired' or 'full'")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


def build_expert_grid(teacher_config, full=False):
    """The 9 canonical (band, task) pairs x regimes, or all 27 cells if ``full``."""
    taps = teacher_config.head_taps
    if not taps["mid_price"] < taps["spread"] < taps["total_volume"]:
        raise ConfigurationError("teacher lacks the canonical ordered head taps")
    if full:
        return [ExpertSpec.make(b, t, r) for r in REGIMES for b in LAYER_BANDS for t in TASKS]
    return [ExpertSpec.make(b, CANONICAL_PAIRS[b], r) for r in REGIMES for b in LAYER_BANDS]


def regime_slice(indices, banding, regime):
    """The subset of ``indices`` labelled ``regime`` by ``banding``.

    Raises:
        DataError: an index without a label, or an empty slice.
    """
    indices = np.asarray(indices, dtype=np.int64)
    pos = np.searchsorted(banding.indices, indices)
    ok = (pos < len(banding.indices)) & (banding.indices[np.minimum(pos, len(banding.indices) - 1)] == indices)
    if not ok.all():
        raise DataError(f"{int((~ok).sum())} indices have no volatility label (need a full trailing window)")
    code = REGIMES.index(regime)
    out = indices[banding.codes[pos] == code]
    if len(out) == 0:
        raise DataError(f"no samples in the {regime!r} regime slice; generate or ingest more data")
    return out


def normalize_feature(f):
    """Parameter-free layer norm over the last axis."""
    f = np.asarray(f, dtype=float)
    c = f - f.mean(axis=-1, keepdims=True)
    return c / np.sqrt((c * c).mean(axis=-1, keepdims=True) + 1e-5)


@dataclass
class TeacherTargets:
    """Frozen-teacher outputs for a set of decision indices.

    ``features[layer]`` is the layer-normalized last-token feature of that
    layer and ``z`` the normalized head predictions, one column per task.
    """

    indices: np.ndarray
    inputs: np.ndarray
    z: np.ndarray
    features: dict
    truth_z: np.ndarray

    def rows(self, indices):
        pos = np.searchsorted(self.indices, indices)
        if np.any(pos >= len(self.indices)) or np.any(self.indices[np.minimum(pos, len(self.indices) - 1)] != indices):
            raise DataError("requested indices are not covered by the teacher targets")
        return pos


def teacher_targets(teacher, dataset, taps=(2, 4, 6)):
    z, feats = teacher.predict_z_batched(dataset.inputs, capture=tuple(taps))
    order = np.argsort(dataset.indices, kind="stable")
    return TeacherTargets(dataset.indices[order], dataset.flat_inputs[order], z[order],
                          {k: normalize_feature(v)[order] for k, v in feats.items()}, dataset.targets_z[order])


@register_architecture
class StudentNet(LayeredModel):
    """Two tanh layers, a scalar head and a feature projector.

    Outputs ``prediction`` (n,) and ``projected`` (n, teacher_dim); feature 2
    is the second hidden layer, the vector the fusion kernel sees.
    """

    architecture = "student_mlp"
    output_names = ("prediction",)

    @classmethod
    def build(cls, input_width, hidden, teacher_dim, seed):
        rng = np.random.default_rng(seed)
        modules = {"layer1": layers.init_dense(rng, input_width, hidden),
                   "layer2": layers.init_dense(rng, hidden, hidden),
                   "head": layers.init_dense(rng, hidden, 1),
                   "projector": layers.init_dense(rng, hidden, teacher_dim)}
        return cls(modules, {"input_width": input_width, "layer_count": 2, "feature_dim": hidden,
                             "teacher_dim": teacher_dim})

    def _forward(self, p, x, capture):
        h1 = ad.tanh(layers.dense(x, p["layer1"]))
        h2 = ad.tanh(layers.dense(h1, p["layer2"]))
        pred = ad.reshape(layers.dense(h2, p["head"]), (-1,))
        feats = {k: v for k, v in ((1, h1), (2, h2)) if k in capture}
        return ForwardResult({"prediction": pred, "projected": layers.dense(h2, p["projector"])}, feats)


@register_architecture
class MonolithNet(LayeredModel):
    """One student for every task and every tapped layer at once."""

    architecture = "monolith_mlp"
    output_names = TASKS

    @classmethod
    def build(cls, input_width, hidden, teacher_dim, seed):
        rng = np.random.default_rng(seed)
        modules = {"layer1": layers.init_dense(rng, input_width, hidden),
                   "layer2": layers.init_dense(rng, hidden, hidden)}
        for t in TASKS:
            modules[f"head_{t}"] = layers.init_dense(rng, hidden, 1)
        for b in LAYER_BANDS:
            modules[f"projector_{b}"] = layers.init_dense(rng, hidden, teacher_dim)
        return cls(modules, {"input_width": input_width, "layer_count": 2, "feature_dim": hidden,
                             "teacher_dim": teacher_dim})

    def _forward(self, p, x, capture):
        h1 = ad.tanh(layers.dense(x, p["layer1"]))
        h2 = ad.tanh(layers.dense(h1, p["layer2"]))
        out = {t: ad.reshape(layers.dense(h2, p[f"head_{t}"]), (-1,)) for t in TASKS}
        for b in LAYER_BANDS:
            out[f"projected_{b}"] = layers.dense(h2, p[f"projector_{b}"])
        feats = {k: v for k, v in ((1, h1), (2, h2)) if k in capture}
        return ForwardResult(out, feats)


def monolith_params(input_width, hidden, teacher_dim):
    return (input_width * hidden + hidden + hidden * hidden + hidden + len(TASKS) * (hidden + 1)
            + len(LAYER_BANDS) * (hidden * teacher_dim + teacher_dim))


def student_params(input_width, hidden, teacher_dim):
    return input_width * hidden + hidden + hidden * hidden + hidden + hidden + 1 + hidden * teacher_dim + teacher_dim


def monolith_width(budget, input_width, teacher_dim):
    """Hidden width whose monolith parameter count is closest to ``budget``."""
    best, h = 1, 1
    while monolith_params(input_width, h, teacher_dim) <= 2 * budget:
        if abs(monolith_params(input_width, h, teacher_dim) - budget) < abs(
                monolith_params(input_width, best, teacher_dim) - budget):
            best = h
        h += 1
    return best


@dataclass
class ExpertModel:
    spec: ExpertSpec
    net: StudentNet
    normalization: object
    history_len: int

    def predict(self, flat_inputs):
        """Normalized prediction (n,) and hidden feature (n, hidden)."""
        res = self.net.forward(np.asarray(flat_inputs), capture=(2,))
        return res.outputs["prediction"].value, res.features[2].value

    def fingerprint(self):
        return self.net.fingerprint()

    def checkpoint_extra(self):
        return {"kind": "expert", "spec": self.spec.to_dict(), "normalization": self.normalization.to_dict(),
                "history_len": self.history_len}

    @classmethod
    def from_checkpoint(cls, net, extra):
        from .teacher import Normalization
        return cls(ExpertSpec.from_dict(extra["spec"]), net, Normalization.from_dict(extra["normalization"]),
                   int(extra["history_len"]))


def distill_loss(student_out, student_feat_projected, teacher_pred, teacher_feat, cfg):
    """``alpha * MSE(features) + beta * MSE(predictions)``.

    Accepts arrays or autodiff values; returns the same kind.

    Raises:
        ConfigurationError: projected and teacher feature shapes differ.
    """
    sf = student_feat_projected.shape
    tf = np.shape(teacher_feat.value if isinstance(teacher_feat, ad.Var) else teacher_feat)
    if tuple(sf) != tuple(tf):
        raise ConfigurationError(f"projected student feature shape {tuple(sf)} != teacher feature shape {tuple(tf)}")
    loss = ad.add(ad.mul(ad.mse(student_feat_projected, teacher_feat), cfg.alpha),
                  ad.mul(ad.mse(student_out, teacher_pred), cfg.beta))
    if not any(isinstance(v, ad.Var) and v.tape is not None for v in (student_out, student_feat_projected)):
        return float(loss.value)
    return loss


class SliceCounter:
    """Records every sample index that contributes to a gradient step."""

    def __init__(self):
        self.indices = set()
        self.steps = 0

    def record(self, idx):
        self.indices.update(int(i) for i in idx)
        self.steps += 1


def _check_teacher_size(teacher, hidden, teacher_dim, input_width):
    n_student = student_params(input_width, hidden, teacher_dim)
    n_teacher = teacher.net.num_parameters()
    if n_student > MAX_STUDENT_FRACTION * n_teacher:
        raise ConfigurationError(f"student has {n_student} parameters, more than 1/20 of the teacher's {n_teacher}")
    return n_student


def train_student(task, layer_band, teacher, targets, indices, cfg, seed, max_steps=None, counter=None):
    """Distill one student on the samples at ``indices``.

    Returns ``(StudentNet, curve)``. ``max_steps`` caps the number of SGD
    steps (minibatches are drawn epoch by epoch from ``indices``).
    """
    cfg.validate()
    indices = np.asarray(indices)
    if len(indices) == 0:
        raise DataError("empty training slice")
    tap = cfg.band_taps[layer_band]
    rows = targets.rows(indices)
    x = targets.inputs[rows]
    tf = targets.features[tap][rows]
    tz = targets.z[rows, TASKS.index(task)]
    _check_teacher_size(teacher, cfg.hidden, tf.shape[1], x.shape[1])
    net = StudentNet.build(x.shape[1], cfg.hidden, tf.shape[1], seed)
    rng = np.random.default_rng([seed, 2])

    def full_loss():
        out = net.forward(x)
        return distill_loss(out.outputs["prediction"].value, out.outputs["projected"].value, tz, tf, cfg)

    init = full_loss()
    curve = {"init_loss": init, "epoch_loss": []}
    steps = 0
    budget = math.inf if max_steps is None else max_steps
    epoch = 0
    while epoch < cfg.epochs or (max_steps is not None and steps < budget):
        if steps >= budget:
            break
        order = rng.permutation(len(x))
        for s in range(0, len(order), cfg.batch_size):
            if steps >= budget:
                break
            b = order[s:s + cfg.batch_size]
            with ad.Tape() as tape:
                out = net.forward(x[b])
                loss = distill_loss(out.outputs["prediction"], out.outputs["projected"], tz[b], tf[b], cfg)
            if not math.isfinite(float(loss.value)):
                raise DivergenceError(f"non-finite distillation loss for {layer_band}/{task} "
                                      f"(seed={seed}, config={cfg.to_dict()})")
            if counter is not None:
                counter.record(indices[b])
            sgd_step(net, tape.gradient(loss), cfg.learning_rate)
            steps += 1
        epoch += 1
        curve["epoch_loss"].append(full_loss())
        if max_steps is None and epoch >= cfg.epochs:
            break
    curve["final_loss"] = full_loss()
    curve["steps"] = steps
    return net, curve


def expert_seed(cfg, spec):
    return [cfg.seed, LAYER_BANDS.index(spec.layer_band), TASKS.index(spec.task), REGIMES.index(spec.regime)]


def train_expert(spec, teacher, targets, banding, train_indices, cfg, counter=None):
    """Train the student for ``spec`` on its regime slice of ``train_indices``.

    Returns ``(ExpertModel, curve)``; ``curve`` has the initial and final
    distillation loss, the per-epoch loss and the slice size.
    """
    cfg.validate()
    idx = regime_slice(train_indices, banding, spec.regime)
    seed = int(np.random.SeedSequence(expert_seed(cfg, spec)).generate_state(1)[0])
    net, curve = train_student(spec.task, spec.layer_band, teacher, targets, idx, cfg, seed, counter=counter)
    curve["slice_size"] = len(idx)
    log.info("expert %s: loss %.4f -> %.4f on %d samples", spec.key, curve["init_loss"], curve["final_loss"], len(idx))
    return ExpertModel(spec, net, teacher.normalization, teacher.config.history_len), curve


def train_experts(specs, teacher, targets, banding, train_indices, cfg):
    experts, curves = [], {}
    for spec in specs:
        e, c = train_expert(spec, teacher, targets, banding, train_indices, cfg)
        experts.append(e)
        curves[spec.key] = c
    return experts, curves


@dataclass
class MonolithModel:
    net: MonolithNet
    normalization: object
    history_len: int

    def predict_z(self, flat_inputs):
        out = self.net.predict(np.asarray(flat_inputs))
        return np.stack([out[t] for t in TASKS], axis=1)

    def checkpoint_extra(self):
        return {"kind": "monolith", "normalization": self.normalization.to_dict(), "history_len": self.history_len}

    @classmethod
    def from_checkpoint(cls, net, extra):
        from .teacher import Normalization
        return cls(net, Normalization.from_dict(extra["normalization"]), int(extra["history_len"]))


def monolithic_baseline(teacher, targets, train_indices, cfg, budget, max_steps=None):
    """One student distilled on every tapped layer and every task, all data.

    ``budget`` is the total parameter count of the expert ensemble; the
    hidden width is chosen so the monolith lands within 5% of it.
    ``max_steps`` caps the SGD steps (``cfg.epochs`` full passes otherwise).
    """
    cfg.validate()
    indices = np.asarray(train_indices)
    rows = targets.rows(indices)
    x = targets.inputs[rows]
    tz = targets.z[rows]
    tfs = {b: targets.features[cfg.band_taps[b]][rows] for b in LAYER_BANDS}
    dim = next(iter(tfs.values())).shape[1]
    hidden = monolith_width(budget, x.shape[1], dim)
    n = monolith_params(x.shape[1], hidden, dim)
    if abs(n - budget) > 0.05 * budget:
        raise ConfigurationError(f"no monolith width within 5% of the {budget}-parameter budget")
    net = MonolithNet.build(x.shape[1], hidden, dim, seed=[cfg.seed, 99])
    rng = np.random.default_rng([cfg.seed, 98])

    def loss_of(out, b, tzb, tfb):
        feat = ad.mul(sum(ad.mse(out[f"projected_{band}"], tfb[band]) for band in LAYER_BANDS), 1.0 / len(LAYER_BANDS))
        pred = ad.mul(sum(ad.mse(out[t], tzb[:, k]) for k, t in enumerate(TASKS)), 1.0 / len(TASKS))
        return ad.add(ad.mul(feat, cfg.alpha), ad.mul(pred, cfg.beta))

    def full_loss():
        out = net.forward(x).outputs
        return float(loss_of(out, None, tz, tfs).value)

    curve = {"init_loss": full_loss(), "epoch_loss": [], "hidden": hidden, "parameters": n}
    steps = 0
    budget_steps = math.inf if max_steps is None else max_steps
    epoch = 0
    while (epoch < cfg.epochs if max_steps is None else steps < budget_steps):
        epoch += 1
        order = rng.permutation(len(x))
        for s in range(0, len(order), cfg.batch_size):
            if steps >= budget_steps:
                break
            steps += 1
            b = order[s:s + cfg.batch_size]
            with ad.Tape() as tape:
                out = net.forward(x[b]).outputs
                loss = loss_of(out, b, tz[b], {k: v[b] for k, v in tfs.items()})
            if not math.isfinite(float(loss.value)):
                raise DivergenceError(f"non-finite monolith loss (config={cfg.to_dict()})")
            sgd_step(net, tape.gradient(loss), cfg.learning_rate)
        curve["epoch_loss"].append(full_loss())
    curve["final_loss"] = full_loss()
    curve["steps"] = steps
    return MonolithModel(net, teacher.normalization, teacher.config.history_len), curve


def expert_budget(experts):
    return int(sum(e.net.num_parameters() for e in experts))


def manifest_entry(expert, path, curve):
    return {"spec": expert.spec.to_dict(), "key": expert.spec.key, "checkpoint": str(path),
            "fingerprint": expert.fingerprint(), "init_loss": curve["init_loss"], "final_loss": curve["final_loss"],
            "slice_size": curve.get("slice_size")}
