"""Projection-scored mixture of experts.

Each expert's input vector ``E_i`` is its hidden feature with its scalar
prediction appended. A shared two-layer kernel maps every ``E_i`` and the
consensus ``E_bar`` (their mean) to 2-D vectors ``V_i`` and ``V_avg``; the
scalar projection ``C_i = V_i . V_avg / |V_avg|`` scores each expert and a
per-task softmax over the scores weights the experts' predictions.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, DivergenceError
from .lobsim.splits import holdout_split
from .netcore import autodiff as ad
from .netcore import layers
from .netcore.model import ForwardResult, LayeredModel, register_architecture, sgd_step
from .teacher import TASKS, clamp_prediction

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12


@register_architecture
class KernelNet(LayeredModel):
    """Dense(in -> hidden) tanh, Dense(hidden -> 2)."""

    architecture = "hajek_kernel"
    output_names = ("v",)

    @classmethod
    def build(cls, input_width, hidden=16, seed=0):
        rng = np.random.default_rng(seed)
        modules = {"layer1": layers.init_dense(rng, input_width, hidden),
                   "layer2": layers.init_dense(rng, hidden, 2)}
        return cls(modules, {"input_width": input_width, "layer_count": 2, "feature_dim": hidden})

    def _forward(self, p, x, capture):
        h = ad.tanh(layers.dense(x, p["layer1"]))
        return ForwardResult({"v": layers.dense(h, p["layer2"])}, {1: h} if 1 in capture else {})


@dataclass
class FusionConfig:
    temperature: float = 1.0
    pair_bias: float = 1.0
    score_mode: str = "softmax"
    kernel_hidden: int = 16
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 0.05
    patience: int = 5
    validation_fraction: float = 0.25
    validation_chunk: int = 125
    seed: int = 0

    def validate(self):
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be > 0")
        if self.pair_bias < 0:
            raise ConfigurationError("pair_bias must be >= 0")
        if self.score_mode not in ("softmax", "clamped-linear"):
            raise ConfigurationError("score_mode must be 'softmax' or 'clamped-linear'")
        if self.kernel_hidden < 1 or self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigurationError("invalid kernel training settings")
        if not 0 < self.validation_fraction < 1:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")
        if self.validation_chunk < 1:
            raise ConfigurationError("validation_chunk must be >= 1")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


# ----------------------------------------------------------------------------
# the three equations, on plain arrays


def consensus(expert_vectors):
    """Elementwise mean of the expert vectors (expert axis first)."""
    if len(expert_vectors) == 0:
        raise ConfigurationError("consensus needs at least one expert")
    arr = np.asarray(expert_vectors, dtype=float)
    return arr.mean(axis=0)


def project(kernel, e):
    """``V = phi(e)`` for one vector or a stack of them."""
    e = np.asarray(e, dtype=float)
    if e.shape[-1] != kernel.input_width:
        raise ConfigurationError(f"expert vector width {e.shape[-1]} != kernel input width {kernel.input_width}")
    return kernel.predict(e)["v"]


def hajek_score(v_i, v_avg):
    """Scalar projection of ``v_i`` on ``v_avg``; 0 where ``|v_avg| < 1e-12``.

    Broadcasts over leading axes. Zero scores give uniform weights after the
    softmax, which is the degenerate-consensus fallback.
    """
    v_i = np.asarray(v_i, dtype=float)
    v_avg = np.asarray(v_avg, dtype=float)
    norm = np.sqrt(np.sum(v_avg * v_avg, axis=-1))
    dot = np.sum(v_i * v_avg, axis=-1)
    safe = np.where(norm < DEGENERATE_NORM, 1.0, norm)
    score = np.where(norm < DEGENERATE_NORM, 0.0, dot / safe)
    return float(score) if score.ndim == 0 else score


def degenerate(v_avg):
    v_avg = np.asarray(v_avg, dtype=float)
    return np.sqrt(np.sum(v_avg * v_avg, axis=-1)) < DEGENERATE_NORM


def task_weights(scores, paired, cfg):
    """Weights over a task's experts (last axis) from their scores."""
    scores = np.asarray(scores, dtype=float)
    if cfg.score_mode == "clamped-linear":
        pos = np.maximum(scores, 0.0)
        tot = pos.sum(axis=-1, keepdims=True)
        uniform = np.full_like(pos, 1.0 / pos.shape[-1])
        return np.where(tot > 0, pos / np.where(tot > 0, tot, 1.0), uniform)
    logits = scores / cfg.temperature + cfg.pair_bias * np.asarray(paired, dtype=float)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class FusionTrace:
    """Everything computed for one fused decision (or a batch of them).

    Arrays carry a leading batch axis when the input was a batch. ``weights``
    maps a task to the weights of ``expert_keys[task]`` in order.
    """

    v: np.ndarray
    v_avg: np.ndarray
    scores: np.ndarray
    weights: dict
    fused_z: np.ndarray
    fused: np.ndarray
    degenerate: np.ndarray
    expert_keys: dict

    def lines(self):
        """One JSON object per decision."""
        batch = self.v.ndim == 3
        n = self.v.shape[0] if batch else 1
        out = []
        for i in range(n):
            pick = (lambda a: a[i]) if batch else (lambda a: a)
            rec = {"V": pick(self.v).tolist(), "V_avg": pick(self.v_avg).tolist(), "C": pick(self.scores).tolist(),
                   "w": {t: pick(w).tolist() for t, w in self.weights.items()},
                   "fused_z": dict(zip(TASKS, pick(self.fused_z).tolist())),
                   "degenerate": bool(pick(self.degenerate))}
            if self.fused is not None:
                rec["fused"] = dict(zip(TASKS, pick(self.fused).tolist()))
            out.append(json.dumps(rec, sort_keys=True))
        return out


class Ensemble:
    """The experts and kernel with every expert's weights stacked.

    All experts must share input width and hidden width. Inference runs as a
    handful of batched matrix products over the expert axis.
    """

    def __init__(self, experts, kernel, cfg=None):
        if not experts:
            raise ConfigurationError("an ensemble needs at least one expert")
        self.experts = list(experts)
        self.kernel = kernel
        self.cfg = (cfg or FusionConfig()).validate()
        nets = [e.net for e in self.experts]
        if len({(n.input_width, n.feature_dim) for n in nets}) != 1:
            raise ConfigurationError("experts must share input and feature widths")
        if kernel.input_width != nets[0].feature_dim + 1:
            raise ConfigurationError(f"kernel input width {kernel.input_width} != expert feature width + 1")
        stack = lambda mod, name: np.stack([n.modules[mod][name] for n in nets])
        self.w1, self.b1 = stack("layer1", "weight"), stack("layer1", "bias")[:, None, :]
        self.w2, self.b2 = stack("layer2", "weight"), stack("layer2", "bias")[:, None, :]
        self.wh, self.bh = stack("head", "weight"), stack("head", "bias")[:, None, :]
        self.task_of = [e.spec.task for e in self.experts]
        missing = [t for t in TASKS if t not in self.task_of]
        if missing:
            raise ConfigurationError(f"no expert for task(s) {missing}")
        self.groups = {t: np.array([i for i, tt in enumerate(self.task_of) if tt == t]) for t in TASKS}
        self.paired = {t: np.array([self.experts[i].spec.paired for i in g]) for t, g in self.groups.items()}
        self.normalization = self.experts[0].normalization
        self.history_len = self.experts[0].history_len

    def num_parameters(self, include_projectors=True):
        n = sum(e.net.num_parameters() if include_projectors else
                e.net.num_parameters(["layer1", "layer2", "head"]) for e in self.experts)
        return n + self.kernel.num_parameters()

    def expert_vectors(self, flat_inputs):
        """``E`` of shape (n, N, hidden + 1) and predictions (n, N)."""
        x = np.asarray(flat_inputs, dtype=float)
        h1 = np.tanh(np.matmul(x[None], self.w1) + self.b1)
        h2 = np.tanh(np.matmul(h1, self.w2) + self.b2)
        pred = (np.matmul(h2, self.wh) + self.bh)[..., 0]
        e = np.concatenate([h2, pred[..., None]], axis=2)
        return np.swapaxes(e, 0, 1), pred.T

    def _kernel(self, e):
        k = self.kernel.modules
        return np.tanh(e @ k["layer1"]["weight"] + k["layer1"]["bias"]) @ k["layer2"]["weight"] + k["layer2"]["bias"]

    def fuse_z(self, flat_inputs, trace=False):
        """Fused normalized predictions (n, 3); with ``trace`` also a FusionTrace."""
        e, pred = self.expert_vectors(flat_inputs)
        v = self._kernel(e)
        v_avg = self._kernel(e.mean(axis=1))
        scores = hajek_score(v, v_avg[:, None, :])
        fused = np.empty((len(e), len(TASKS)))
        weights = {}
        for k, t in enumerate(TASKS):
            g = self.groups[t]
            w = task_weights(scores[:, g], self.paired[t], self.cfg)
            weights[t] = w
            fused[:, k] = np.sum(w * pred[:, g], axis=1)
        if not trace:
            return fused
        keys = {t: [self.experts[i].spec.key for i in g] for t, g in self.groups.items()}
        return fused, FusionTrace(v, v_avg, scores, weights, fused, None, degenerate(v_avg), keys)

    def predict(self, flat_inputs, ref_mid, trace=False):
        """De-normalized, clamped (mid, spread, volume) arrays."""
        z, tr = self.fuse_z(flat_inputs, trace=True)
        raw = self.normalization.targets_from_z(z, np.asarray(ref_mid, dtype=float).reshape(-1))
        out = clamp_prediction(raw[:, 0], raw[:, 1], raw[:, 2], self.normalization.tick_size)
        if trace:
            tr.fused = np.stack(out, axis=1)
            return out, tr
        return out


def fuse(experts, kernel, cfg, inputs, ref_mid=None):
    """Fuse the experts on one flattened input (or a batch) and return the trace."""
    ens = experts if isinstance(experts, Ensemble) else Ensemble(experts, kernel, cfg)
    x = np.asarray(inputs, dtype=float)
    single = x.ndim == 1
    xb = x[None] if single else x
    if ref_mid is None:
        z, tr = ens.fuse_z(xb, trace=True)
        tr.fused = z
    else:
        _, tr = ens.predict(xb, ref_mid, trace=True)
    if single:
        tr = FusionTrace(tr.v[0], tr.v_avg[0], tr.scores[0], {t: w[0] for t, w in tr.weights.items()},
                         tr.fused_z[0], tr.fused[0], tr.degenerate[0], tr.expert_keys)
    return tr


def fuse_reference(experts, kernel, cfg, flat_input):
    """Unbatched fusion of one input, expert by expert (test oracle for :class:`Ensemble`)."""
    es, preds = [], []
    for ex in experts:
        p, f = ex.predict(np.asarray(flat_input)[None])
        es.append(np.concatenate([f[0], p]))
        preds.append(p[0])
    e_bar = consensus(es)
    v_avg = project(kernel, e_bar)
    v = [project(kernel, e) for e in es]
    c = np.array([hajek_score(vi, v_avg) for vi in v])
    out = {}
    for t in TASKS:
        g = [i for i, ex in enumerate(experts) if ex.spec.task == t]
        w = task_weights(c[g], [experts[i].spec.paired for i in g], cfg)
        out[t] = float(np.sum(w * np.array(preds)[g]))
    return out


# ----------------------------------------------------------------------------
# kernel training


def _fused_loss(kernel_params, e, pred, target_z, groups, paired, cfg):
    """Differentiable mean-over-tasks MSE of the fused prediction."""
    k1, k2 = kernel_params["layer1"], kernel_params["layer2"]
    phi = lambda x: layers.dense(ad.tanh(layers.dense(x, k1)), k2)
    v = phi(ad.constant(e))
    v_avg = phi(ad.constant(e.mean(axis=1)))
    n = len(e)
    va = ad.reshape(v_avg, (n, 1, 2))
    norm = ad.sqrt(ad.add(ad.sum_(ad.square(v_avg), axis=-1, keepdims=True), 1e-24))
    scores = ad.div(ad.sum_(ad.mul(v, va), axis=-1), norm)
    total = None
    for k, t in enumerate(TASKS):
        g = groups[t]
        logits = ad.add(ad.mul(ad.getitem(scores, (slice(None), g)), 1.0 / cfg.temperature),
                        cfg.pair_bias * paired[t].astype(float))
        w = ad.softmax(logits, axis=-1)
        fused = ad.sum_(ad.mul(w, pred[:, g]), axis=-1)
        term = ad.mse(fused, target_z[:, k])
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(TASKS))


def train_kernel(experts, flat_inputs, target_z, cfg=None, seed=None):
    """Fit the kernel so fused predictions match the normalized targets ``target_z``.

    Experts stay frozen. Consecutive chunks of ``validation_chunk`` rows are
    held out in turn (about ``validation_fraction`` of the slice) for early
    stopping, so every stretch of the slice is represented; the parameters with the best validation loss
    are returned together with the loss curve.

    Raises:
        DivergenceError: non-finite loss.
    """
    cfg = (cfg or FusionConfig()).validate()
    seed = cfg.seed if seed is None else seed
    width = experts[0].net.feature_dim + 1
    kernel = KernelNet.build(width, cfg.kernel_hidden, seed=[seed, 7])
    ens = Ensemble(experts, kernel, cfg)
    e, pred = ens.expert_vectors(flat_inputs)
    target_z = np.asarray(target_z, dtype=float)
    tr, va = holdout_split(len(e), cfg.validation_fraction, cfg.validation_chunk)
    rng = np.random.default_rng([seed, 8])

    def val_loss():
        return float(_fused_loss(kernel.modules, e[va], pred[va], target_z[va], ens.groups, ens.paired, cfg).value)

    best = val_loss()
    best_modules = {m: dict(b) for m, b in kernel.modules.items()}
    curve = [{"epoch": 0, "val_loss": best}]
    stale = 0
    n_tr = len(tr)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_tr)
        for s in range(0, n_tr, cfg.batch_size):
            b = tr[order[s:s + cfg.batch_size]]
            with ad.Tape() as tape:
                p = {m: {k: ad.parameter(a, (m, k)) for k, a in blk.items()} for m, blk in kernel.modules.items()}
                loss = _fused_loss(p, e[b], pred[b], target_z[b], ens.groups, ens.paired, cfg)
            if not math.isfinite(float(loss.value)):
                raise DivergenceError(f"non-finite kernel loss at epoch {epoch} (config={cfg.to_dict()})")
            sgd_step(kernel, tape.gradient(loss), cfg.learning_rate)
        vl = val_loss()
        curve.append({"epoch": epoch, "val_loss": vl})
        if vl < best - 1e-9:
            best, stale = vl, 0
            best_modules = {m: dict(b) for m, b in kernel.modules.items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    kernel.modules = best_modules
    return kernel, curve
