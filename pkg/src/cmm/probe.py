"""Normalized noise-perturbation probe for module-to-output attribution.

For every module, noise distribution, amplitude range and trial, the
module's parameters are shifted by ``A_scale * eps`` with ``A_scale`` drawn
uniformly in the range, the mean absolute change of every output over a
fixed evaluation batch is measured, normalized by the range endpoints and
averaged into an influence matrix ``S`` (modules x outputs). The attribution
map holds, for each output, the module with the largest influence.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError
from .netcore.model import LayeredModel, register_architecture, ForwardResult
from .netcore import autodiff as ad
from .netcore import layers

DISTRIBUTIONS = ("gaussian", "uniform")


@dataclass
class ProbeConfig:
    noise_distributions: tuple = DISTRIBUTIONS
    amplitude_ranges: tuple = ((0.001, 0.01), (0.01, 0.1))
    trials_per_cell: int = 16
    seed: int = 0
    eval_batch: int = 256

    def validate(self):
        if not self.noise_distributions:
            raise ConfigurationError("at least one noise distribution is required")
        unknown = set(self.noise_distributions) - set(DISTRIBUTIONS)
        if unknown:
            raise ConfigurationError(f"unknown noise distribution(s) {sorted(unknown)}")
        if not self.amplitude_ranges:
            raise ConfigurationError("at least one amplitude range is required")
        for a_min, a_max in self.amplitude_ranges:
            if not (0 <= a_min < a_max):
                raise ConfigurationError(f"amplitude range ({a_min}, {a_max}) needs 0 <= a_min < a_max")
        if self.trials_per_cell < 1 or self.eval_batch < 1:
            raise ConfigurationError("trials_per_cell and eval_batch must be >= 1")
        self.noise_distributions = tuple(self.noise_distributions)
        self.amplitude_ranges = tuple(tuple(map(float, r)) for r in self.amplitude_ranges)
        return self

    def scaled(self, factor):
        """Copy with every amplitude range multiplied by ``factor``."""
        return ProbeConfig(self.noise_distributions, tuple((a * factor, b * factor) for a, b in self.amplitude_ranges),
                           self.trials_per_cell, self.seed, self.eval_batch)


def sample_noise(distribution, shape, rng):
    """Standard normal or U(-1, 1) noise of ``shape``."""
    if distribution == "gaussian":
        return rng.standard_normal(shape)
    if distribution == "uniform":
        return rng.uniform(-1.0, 1.0, shape)
    raise ConfigurationError(f"unknown noise distribution {distribution!r}")


def module_noise(model, module, distribution, rng):
    if module not in model.modules:
        raise ConfigurationError(f"unknown module {module!r}")
    return {name: sample_noise(distribution, arr.shape, rng) for name, arr in model.modules[module].items()}


def perturb_module(model, module, eps, scale):
    """Model view with ``theta + scale * eps`` in ``module`` only.

    The original model is never written to, so "restoring" it is exact by
    construction; every other module shares its arrays with the original.
    """
    if module not in model.modules:
        raise ConfigurationError(f"unknown module {module!r}")
    block = model.modules[module]
    if set(eps) != set(block) or any(eps[k].shape != block[k].shape for k in block):
        raise ConfigurationError(f"noise does not match the parameter shapes of {module!r}")
    return model.replace_module(module, {k: block[k] + scale * eps[k] for k in block})


def _outputs(model, batch):
    res = model.forward(batch)
    return {k: v.value for k, v in res.outputs.items()}


def output_delta(model, perturbed, eval_batch, output_id, reference=None):
    """Batch mean of ``|f(theta_perturbed)_o - f(theta_original)_o|``."""
    ref = _outputs(model, eval_batch)[output_id] if reference is None else reference
    new = _outputs(perturbed, eval_batch)[output_id]
    return float(np.mean(np.abs(new - ref)))


def normalize_delta(delta, a_min, a_max):
    """``(delta - a_min) / (a_max - a_min)``, unclipped."""
    return (delta - a_min) / (a_max - a_min)


def argmax_map(S):
    """Per-output index of the most influential module (lowest index on ties)."""
    return tuple(int(i) for i in np.argmax(np.asarray(S), axis=0))


@dataclass
class AttributionResult:
    """Influence matrix ``S`` and attribution map ``C``.

    ``S`` follows the normalization ``(delta - a_min) / (a_max - a_min)``
    verbatim, so entries can fall outside [0, 1]; ``S_clamped`` clips every
    normalized delta to [0, 1] before averaging. ``raw_delta`` is the mean
    un-normalized delta and ``per_distribution`` keeps ``S`` split by noise
    type. ``C[o]`` is the argmax of column ``o`` of ``S``, lowest index on ties.
    """

    S: np.ndarray
    C: tuple
    S_clamped: np.ndarray
    C_clamped: tuple
    raw_delta: np.ndarray
    per_distribution: dict
    module_names: tuple
    output_names: tuple
    config: dict = field(default_factory=dict)

    def attribution_map(self):
        return {o: self.module_names[m] for o, m in zip(self.output_names, self.C)}

    def table_rows(self):
        rows = []
        for i, m in enumerate(self.module_names):
            for j, o in enumerate(self.output_names):
                row = {"module": m, "output": o, "S": repr(float(self.S[i, j])),
                       "S_clamped": repr(float(self.S_clamped[i, j])), "raw_delta": repr(float(self.raw_delta[i, j]))}
                for d, mat in self.per_distribution.items():
                    row[f"S_{d}"] = repr(float(mat[i, j]))
                rows.append(row)
        return rows

    def to_text(self):
        width = max(len(m) for m in self.module_names) + 2
        lines = ["influence matrix S (rows: modules, columns: outputs)",
                 " " * width + "".join(f"{o:>16}" for o in self.output_names)]
        for i, m in enumerate(self.module_names):
            lines.append(f"{m:<{width}}" + "".join(f"{v:>16.6g}" for v in self.S[i]))
        lines.append("")
        lines.append("attribution map C")
        for o, m in self.attribution_map().items():
            lines.append(f"  {o} -> {m}")
        clamped = {o: self.module_names[m] for o, m in zip(self.output_names, self.C_clamped)}
        if clamped != self.attribution_map():
            lines.append("attribution map from clamped S differs:")
            for o, m in clamped.items():
                lines.append(f"  {o} -> {m}")
        lines.append("")
        lines.append(f"config: {self.config}")
        return "\n".join(lines) + "\n"

    def write_table(self, path):
        rows = self.table_rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        return path

    def write(self, path, extra_lines=()):
        """Write the text report to ``path`` and the table next to it as CSV."""
        with open(path, "w") as fh:
            fh.write(self.to_text())
            for line in extra_lines:
                fh.write(line + "\n")
        return path, self.write_table(str(path) + ".csv")


def run_probe(model, eval_batch, config=None, modules=None, outputs=None):
    """Attribute each output of ``model`` to one of ``modules``.

    ``modules`` defaults to every module of the model, ``outputs`` to every
    output head. Each (module, distribution, range, trial) cell draws from its
    own generator keyed by those indices, so results do not depend on the
    order in which cells are evaluated.
    """
    config = (config or ProbeConfig()).validate()
    modules = tuple(model.module_names() if modules is None else modules)
    for m in modules:
        model.module_index(m)
    session = model.probe_session(eval_batch)
    reference = session.reference
    outputs = tuple(reference if outputs is None else outputs)
    n_m, n_o = len(modules), len(outputs)
    ranges = config.amplitude_ranges
    n_cells = len(ranges) * config.trials_per_cell
    per_dist, per_dist_clamped = {}, {}
    raw = np.zeros((n_m, n_o))
    for di, dist in enumerate(config.noise_distributions):
        S_d = np.zeros((n_m, n_o))
        S_dc = np.zeros((n_m, n_o))
        for mi, module in enumerate(modules):
            for ri, (a_min, a_max) in enumerate(ranges):
                for trial in range(config.trials_per_cell):
                    rng = np.random.default_rng([config.seed, mi, di, ri, trial])
                    scale = rng.uniform(a_min, a_max)
                    eps = module_noise(model, module, dist, rng)
                    new = session.outputs(module, perturb_module(model, module, eps, scale).modules[module])
                    for oi, o in enumerate(outputs):
                        delta = float(np.mean(np.abs(new[o] - reference[o])))
                        norm = normalize_delta(delta, a_min, a_max)
                        raw[mi, oi] += delta
                        S_d[mi, oi] += norm
                        S_dc[mi, oi] += min(max(norm, 0.0), 1.0)
        per_dist[dist] = S_d / n_cells
        per_dist_clamped[dist] = S_dc / n_cells
    S = np.mean(list(per_dist.values()), axis=0)
    S_clamped = np.mean(list(per_dist_clamped.values()), axis=0)
    raw /= n_cells * len(config.noise_distributions)
    return AttributionResult(S, argmax_map(S), S_clamped, argmax_map(S_clamped), raw, per_dist,
                             modules, outputs, asdict(config))


@register_architecture
class ParallelBranches(LayeredModel):
    """Independent tanh branches, branch ``k`` alone producing output ``out{k}``.

    Module ``branch{k}`` holds all of branch ``k``'s parameters, so the true
    module-to-output map is the identity. Used as a probe ground truth.
    """

    architecture = "parallel_branches"

    @classmethod
    def build(cls, n_branches=3, input_width=4, hidden=8, seed=0):
        rng = np.random.default_rng(seed)
        modules = {}
        for k in range(n_branches):
            block = {}
            block.update({f"h_{n}": v for n, v in layers.init_dense(rng, input_width, hidden).items()})
            block.update({f"o_{n}": v for n, v in layers.init_dense(rng, hidden, 1).items()})
            modules[f"branch{k}"] = block
        return cls(modules, {"input_width": input_width, "layer_count": 1, "feature_dim": hidden,
                             "n_branches": n_branches})

    @property
    def output_names(self):
        return tuple(f"out{k}" for k in range(self.config["n_branches"]))

    def _forward(self, p, x, capture):
        outs, feats = {}, {}
        for k in range(self.config["n_branches"]):
            blk = p[f"branch{k}"]
            h = ad.tanh(layers.dense(x, blk, "h_"))
            outs[f"out{k}"] = ad.reshape(layers.dense(h, blk, "o_"), (-1,))
        return ForwardResult(outs, feats)


def layer_band(layer, taps):
    """shallow / middle / deep for a teacher layer index (0 = embedding)."""
    if layer <= taps["mid_price"]:
        return "shallow"
    if layer <= taps["spread"]:
        return "middle"
    return "deep"


def probe_teacher(teacher, eval_inputs, config=None):
    """Probe every module of the teacher against its three heads.

    Returns the :class:`AttributionResult` and the band of the module picked
    for each task.
    """
    net = teacher.net
    layer_of = {name: i for i, name in net.layer_modules().items()}
    result = run_probe(net, eval_inputs, config)
    bands = {o: layer_band(layer_of[m], teacher.taps) for o, m in result.attribution_map().items()}
    return result, bands
