"""Surrogate teacher: a small multi-task pre-LN transformer over book windows.

Each task head reads the normalized last-token feature of one tapped layer
and its parameters live inside that layer's block, so the mid-price head
only depends on the shallow layers, the spread head on the layers up to the
middle tap and the volume head on the whole stack.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, DivergenceError
from .lobsim.book import DEPTH
from .lobsim.ladder import MIN_TOTAL_VOLUME
from .lobsim.splits import holdout_split
from .netcore import autodiff as ad
from .netcore import layers
from .netcore.model import ForwardResult, LayeredModel, register_architecture, sgd_step

log = logging.getLogger(__name__)

TASKS = ("mid_price", "spread", "total_volume")
SNAPSHOT_FEATURES = 4 * DEPTH + 2
DEFAULT_TAPS = {"mid_price": 2, "spread": 4, "total_volume": 6}


@dataclass
class TeacherConfig:
    layer_count: int = 6
    feature_dim: int = 64
    history_len: int = 8
    mlp_hidden: int = 128
    head_taps: dict = field(default_factory=lambda: dict(DEFAULT_TAPS))
    epochs: int = 4
    batch_size: int = 64
    learning_rate: float = 0.03
    val_fraction: float = 0.1
    val_chunk: int = 500

    def validate(self):
        if self.layer_count < 1 or self.feature_dim < 1 or self.history_len < 1 or self.mlp_hidden < 1:
            raise ConfigurationError("teacher sizes must be positive")
        if self.feature_dim > 64:
            raise ConfigurationError("feature_dim is capped at 64")
        if set(self.head_taps) != set(TASKS):
            raise ConfigurationError(f"head_taps must name exactly {TASKS}")
        taps = [self.head_taps[t] for t in TASKS]
        if any(not 1 <= t <= self.layer_count for t in taps):
            raise ConfigurationError(f"head taps {taps} outside 1..{self.layer_count}")
        if not taps[0] < taps[1] < taps[2]:
            raise ConfigurationError("head taps must be ordered mid_price < spread < total_volume")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0 or not 0 < self.val_fraction < 1 \
                or self.val_chunk < 1:
            raise ConfigurationError("invalid teacher training settings")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


# ----------------------------------------------------------------------------
# features and targets


def sample_indices(series, history_len):
    """Indices with enough history and a next snapshot to predict."""
    return np.arange(history_len, len(series) - 1)


def raw_windows(series, indices, history_len):
    """Un-normalized windows, shape ``(n, history_len, 22)``.

    Prices are expressed in ticks relative to the mid at the decision index;
    a missing trade is encoded as price offset 0 and volume 0.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) and (indices.min() < history_len or indices.max() >= len(series)):
        raise DataError(f"indices need {history_len} snapshots of history inside the series")
    tick = series.tick_size
    ref = series.mid[indices]
    rows = indices[:, None] - np.arange(history_len - 1, -1, -1)[None, :]
    has_trade = np.isfinite(series.trade_px)
    trade_px = np.where(has_trade, series.trade_px, 0.0)
    trade_vol = np.where(has_trade, series.trade_vol, 0.0)
    r = ref[:, None, None]
    bid_px = (series.bid_px[rows] - r) / tick
    ask_px = (series.ask_px[rows] - r) / tick
    tpx = np.where(has_trade[rows], (trade_px[rows] - ref[:, None]) / tick, 0.0)[..., None]
    return np.concatenate([bid_px, series.bid_vol[rows], ask_px, series.ask_vol[rows], tpx,
                           trade_vol[rows][..., None]], axis=2)


def raw_targets(series, indices):
    """Next-snapshot (mid, spread, total depth volume) and the current mid."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) and indices.max() + 1 >= len(series):
        raise DataError("the last snapshot has no next-step target")
    nxt = indices + 1
    targets = np.stack([series.mid[nxt], series.spread[nxt], series.depth_volume[nxt]], axis=1)
    return targets, series.mid[indices]


@dataclass
class Normalization:
    """Training-split z-scoring for inputs and targets.

    The mid-price target is scored as the next mid change in ticks so that
    it is stationary; :meth:`targets_from_z` maps it back to a price.
    """

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    tick_size: float

    @classmethod
    def fit(cls, windows, targets, ref_mid, tick_size):
        x_mean = windows.mean(axis=0)
        x_std = windows.std(axis=0)
        x_std = np.where(x_std > 1e-12, x_std, 1.0)
        y = cls._stationary(targets, ref_mid, tick_size)
        y_mean = y.mean(axis=0)
        y_std = y.std(axis=0)
        y_std = np.where(y_std > 1e-12, y_std, 1.0)
        return cls(x_mean, x_std, y_mean, y_std, float(tick_size))

    @staticmethod
    def _stationary(targets, ref_mid, tick_size):
        y = np.array(targets, dtype=float, copy=True)
        y[..., 0] = (y[..., 0] - ref_mid) / tick_size
        return y

    def inputs(self, windows):
        return (windows - self.x_mean) / self.x_std

    def targets_to_z(self, targets, ref_mid):
        return (self._stationary(targets, ref_mid, self.tick_size) - self.y_mean) / self.y_std

    def targets_from_z(self, z, ref_mid):
        y = np.asarray(z) * self.y_std + self.y_mean
        y = np.array(y, dtype=float, copy=True)
        y[..., 0] = ref_mid + y[..., 0] * self.tick_size
        return y

    def to_dict(self):
        return {k: np.asarray(v).tolist() if isinstance(v, np.ndarray) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["x_mean"], float), np.asarray(d["x_std"], float), np.asarray(d["y_mean"], float),
                   np.asarray(d["y_std"], float), float(d["tick_size"]))


def featurize(series, index, history_len, normalization=None):
    """Input matrix ``(history_len, 22)`` for one decision index.

    Raises:
        DataError: fewer than ``history_len`` snapshots before ``index``.
    """
    if index < history_len or index >= len(series):
        raise DataError(f"index {index} needs {history_len} snapshots of history")
    w = raw_windows(series, [index], history_len)
    if normalization is not None:
        w = normalization.inputs(w)
    return w[0]


@dataclass
class Dataset:
    """Normalized model inputs and targets for a set of decision indices."""

    indices: np.ndarray
    inputs: np.ndarray
    targets_z: np.ndarray
    targets_raw: np.ndarray
    ref_mid: np.ndarray

    def __len__(self):
        return len(self.indices)

    def subset(self, positions):
        positions = np.asarray(positions)
        return Dataset(self.indices[positions], self.inputs[positions], self.targets_z[positions],
                       self.targets_raw[positions], self.ref_mid[positions])

    @property
    def flat_inputs(self):
        return self.inputs.reshape(len(self.inputs), -1)


def make_dataset(series, indices, history_len, normalization):
    windows = raw_windows(series, indices, history_len)
    targets, ref = raw_targets(series, indices)
    return Dataset(np.asarray(indices), normalization.inputs(windows), normalization.targets_to_z(targets, ref),
                   targets, ref)


# ----------------------------------------------------------------------------
# network


@register_architecture
class TeacherNet(LayeredModel):
    """Embedding plus ``L`` pre-LN attention blocks with three scalar heads.

    A task head (its own layer norm and a dense map to one value) reads the
    last token of the layer it taps and its parameters are stored in that
    layer's block, so module ``block{k}`` holds everything layer ``k``
    contributes to the outputs.
    """

    architecture = "teacher_transformer"
    output_names = TASKS

    @classmethod
    def build(cls, config, seed):
        config.validate()
        rng = np.random.default_rng(seed)
        d = config.feature_dim
        modules = {"embedding": {**layers.init_dense(rng, SNAPSHOT_FEATURES, d),
                                 "position": rng.normal(0.0, 0.1, size=(config.history_len, d))}}
        head_at = {tap: task for task, tap in config.head_taps.items()}
        for i in range(1, config.layer_count + 1):
            block = {}
            block.update({f"ln1_{k}": v for k, v in layers.init_layer_norm(d).items()})
            block.update(layers.init_attention(rng, d))
            block.update({f"ln2_{k}": v for k, v in layers.init_layer_norm(d).items()})
            block.update(layers.init_mlp(rng, d, config.mlp_hidden))
            if i in head_at:
                block.update({f"head_{k}": v for k, v in layers.init_layer_norm(d).items()})
                block.update({f"head_{k}": v for k, v in layers.init_dense(rng, d, 1, scale=0.1 / math.sqrt(d)).items()})
            modules[f"block{i}"] = block
        cfg = {"input_width": SNAPSHOT_FEATURES, "layer_count": config.layer_count, "feature_dim": d,
               "history_len": config.history_len, "head_taps": dict(config.head_taps)}
        return cls(modules, cfg)

    def layer_modules(self):
        """Module name for each layer index; the embedding is layer 0."""
        return {0: "embedding", **{i: f"block{i}" for i in range(1, self.layer_count + 1)}}

    def head_module(self, task):
        return f"block{self.config['head_taps'][task]}"

    def _block(self, p, h, i):
        blk = p[f"block{i}"]
        h = h + layers.self_attention(layers.layer_norm(h, blk, "ln1_"), blk)
        return h + layers.mlp(layers.layer_norm(h, blk, "ln2_"), blk)

    def _head(self, p, h, task):
        blk = p[self.head_module(task)]
        last = layers.layer_norm(ad.getitem(h, (slice(None), -1, slice(None))), blk, "head_")
        return ad.reshape(layers.dense(last, blk, "head_"), (-1,))

    def _forward(self, p, x, capture):
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        taps = self.config["head_taps"]
        depth = max(max(taps.values()), max(capture, default=0))
        emb = p["embedding"]
        h = layers.dense(x, emb) + emb["position"]
        feats, outputs = {}, {}
        for i in range(1, depth + 1):
            h = self._block(p, h, i)
            if i in capture:
                feats[i] = h
            for task, tap in taps.items():
                if tap == i:
                    outputs[task] = self._head(p, h, task)
        return ForwardResult({t: outputs[t] for t in TASKS}, feats)

    def probe_session(self, x):
        return _TeacherProbeSession(self, x)


class _TeacherProbeSession:
    """Caches the hidden state after every layer of the unperturbed net.

    Swapping layer ``k`` resumes the forward from the cached state below it,
    and heads tapped below ``k`` keep their reference output.
    """

    def __init__(self, net, x):
        self.net = net
        x = np.asarray(x, dtype=net.dtype)
        self.x = ad.Var(x[None] if x.ndim == 2 else x)
        self.params = {m: {n: ad.Var(a) for n, a in b.items()} for m, b in net.modules.items()}
        self.taps = net.config["head_taps"]
        self.depth = max(self.taps.values())
        self.states = self._run(self.params, 0, None)
        self.reference = {t: net._head(self.params, self.states[tap], t).value for t, tap in self.taps.items()}

    def _run(self, p, start, h):
        states = {}
        if start == 0:
            emb = p["embedding"]
            h = layers.dense(self.x, emb) + emb["position"]
            states[0] = h
            start = 1
        for i in range(start, self.depth + 1):
            h = self.net._block(p, h, i)
            states[i] = h
        return states

    def outputs(self, module, block):
        p = dict(self.params)
        p[module] = {n: ad.Var(a) for n, a in block.items()}
        layer = 0 if module == "embedding" else int(module[len("block"):])
        states = self._run(p, layer, self.states.get(layer - 1))
        return {t: (self.reference[t] if tap < layer else self.net._head(p, states[tap], t).value)
                for t, tap in self.taps.items()}


@dataclass
class TeacherModel:
    net: TeacherNet
    normalization: Normalization
    config: TeacherConfig

    @property
    def taps(self):
        return dict(self.config.head_taps)

    def predict_z(self, inputs, capture=()):
        """Normalized predictions ``(n, 3)`` and last-token features per layer."""
        res = self.net.forward(inputs, capture)
        z = np.stack([res.outputs[t].value for t in TASKS], axis=1)
        return z, {k: v.value[:, -1, :] for k, v in res.features.items()}

    def predict_z_batched(self, inputs, capture=(), batch=512):
        zs, feats = [], {k: [] for k in capture}
        for s in range(0, len(inputs), batch):
            z, f = self.predict_z(inputs[s:s + batch], capture)
            zs.append(z)
            for k in capture:
                feats[k].append(f[k])
        return np.concatenate(zs), {k: np.concatenate(v) for k, v in feats.items()}

    def predict_z_fast(self, inputs):
        """Normalized predictions ``(n, 3)`` from plain numpy, no graph wrappers.

        Matches :meth:`predict_z` to rounding; used where per-call overhead
        matters (decision latency).
        """
        return _numpy_forward(self.net, inputs)

    def fingerprint(self):
        return self.net.fingerprint()

    def checkpoint_extra(self):
        return {"kind": "teacher", "normalization": self.normalization.to_dict(), "teacher_config": self.config.to_dict()}

    @classmethod
    def from_checkpoint(cls, net, extra):
        return cls(net, Normalization.from_dict(extra["normalization"]), TeacherConfig.from_dict(extra["teacher_config"]))


def _ln(x, g, b):
    c = x - x.mean(axis=-1, keepdims=True)
    return c / np.sqrt((c * c).mean(axis=-1, keepdims=True) + 1e-5) * g + b


def _numpy_forward(net, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    m = net.modules
    taps = net.config["head_taps"]
    h = x @ m["embedding"]["weight"] + m["embedding"]["bias"] + m["embedding"]["position"]
    out = np.empty((len(x), len(TASKS)))
    scale = 1.0 / math.sqrt(h.shape[-1])
    for i in range(1, max(taps.values()) + 1):
        p = m[f"block{i}"]
        a = _ln(h, p["ln1_gamma"], p["ln1_beta"])
        q = a @ p["w_query"] + p["b_query"]
        k = a @ p["w_key"] + p["b_key"]
        v = a @ p["w_value"] + p["b_value"]
        sc = (q @ np.swapaxes(k, -1, -2)) * scale
        sc = np.exp(sc - sc.max(axis=-1, keepdims=True))
        sc /= sc.sum(axis=-1, keepdims=True)
        h = h + (sc @ v) @ p["w_out"] + p["b_out"]
        a = _ln(h, p["ln2_gamma"], p["ln2_beta"])
        h = h + np.tanh(a @ p["w_hidden"] + p["b_hidden"]) @ p["w_proj"] + p["b_proj"]
        for j, task in enumerate(TASKS):
            if taps[task] == i:
                last = _ln(h[:, -1, :], p["head_gamma"], p["head_beta"])
                out[:, j] = (last @ p["head_weight"] + p["head_bias"])[:, 0]
    return out


def clamp_prediction(mid, spread, volume, tick_size):
    """Keep spread >= one tick and volume >= the ladder minimum."""
    return mid, np.maximum(spread, tick_size), np.maximum(volume, MIN_TOTAL_VOLUME)


def teacher_predict(model, inputs, ref_mid, capture=None):
    """De-normalized, clamped (mid, spread, total_volume) plus features.

    ``inputs`` is a normalized window ``(T, 22)`` or a batch ``(n, T, 22)``;
    features default to every layer.
    """
    single = np.ndim(inputs) == 2
    x = inputs[None] if single else inputs
    capture = range(1, model.net.layer_count + 1) if capture is None else capture
    res = model.net.forward(x, capture)
    z = np.stack([res.outputs[t].value for t in TASKS], axis=1)
    raw = model.normalization.targets_from_z(z, np.asarray(ref_mid, dtype=float).reshape(-1))
    mid, spread, vol = clamp_prediction(raw[:, 0], raw[:, 1], raw[:, 2], model.normalization.tick_size)
    feats = res.feature_values()
    if single:
        return (float(mid[0]), float(spread[0]), float(vol[0])), {k: v[0] for k, v in feats.items()}
    return (mid, spread, vol), feats


def constant_baseline_mse(targets):
    """MSE of predicting each column's mean: the per-task variance."""
    return np.var(targets, axis=0)


def train_teacher(series, config=None, seed=0, indices=None, normalization=None):
    """Fit the teacher on ``series`` at ``indices`` (all usable by default).

    Every ``round(1/val_fraction)``-th chunk of ``val_chunk`` indices is held
    out for the curve, so validation spans every regime of the series.
    Returns ``(TeacherModel, curve)`` where ``curve`` is a list of dicts with
    epoch, train loss and validation per-task MSE in normalized units.

    Raises:
        DataError: fewer than 5,000 usable samples.
        DivergenceError: a non-finite loss.
    """
    config = (config or TeacherConfig()).validate()
    if indices is None:
        indices = sample_indices(series, config.history_len)
    indices = np.asarray(indices)
    if len(indices) < 5000:
        raise DataError(f"teacher training needs >= 5000 usable samples, got {len(indices)}")
    fit_pos, val_pos = holdout_split(len(indices), config.val_fraction, config.val_chunk)
    fit_idx, val_idx = indices[fit_pos], indices[val_pos]
    if normalization is None:
        w = raw_windows(series, fit_idx, config.history_len)
        t, ref = raw_targets(series, fit_idx)
        normalization = Normalization.fit(w, t, ref, series.tick_size)
    train = make_dataset(series, fit_idx, config.history_len, normalization)
    val = make_dataset(series, val_idx, config.history_len, normalization)
    net = TeacherNet.build(config, seed)
    model = TeacherModel(net, normalization, config)
    rng = np.random.default_rng([seed, 1])
    curve = [_teacher_eval(model, val, 0, float("nan"))]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for s in range(0, len(order), config.batch_size):
            b = order[s:s + config.batch_size]
            with ad.Tape() as tape:
                res = net.forward(train.inputs[b])
                loss = ad.mul(sum(ad.mse(res.outputs[t], train.targets_z[b, k]) for k, t in enumerate(TASKS)),
                              1.0 / len(TASKS))
            value = float(loss.value)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite teacher loss at epoch {epoch}, batch {s // config.batch_size}; "
                                      f"lr={config.learning_rate}, seed={seed}")
            sgd_step(net, tape.gradient(loss), config.learning_rate)
            losses.append(value)
        curve.append(_teacher_eval(model, val, epoch, float(np.mean(losses))))
        log.info("teacher epoch %d train %.4f val %s", epoch, curve[-1]["train_loss"], curve[-1]["val_mse"])
    return model, curve


def _teacher_eval(model, data, epoch, train_loss):
    z, _ = model.predict_z_batched(data.inputs)
    mse = ((z - data.targets_z) ** 2).mean(axis=0)
    return {"epoch": epoch, "train_loss": train_loss, "val_mse": dict(zip(TASKS, mse.tolist())),
            "val_baseline": dict(zip(TASKS, constant_baseline_mse(data.targets_z).tolist()))}
