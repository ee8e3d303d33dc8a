"""Layered models: ordered named parameter blocks plus a forward rule."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError
from . import autodiff as ad
from . import layers

ARCHITECTURES: dict[str, type] = {}


def register_architecture(cls):
    """Class decorator making an architecture loadable from checkpoints."""
    ARCHITECTURES[cls.architecture] = cls
    return cls


@dataclass
class ForwardResult:
    outputs: dict
    features: dict

    def output_values(self):
        return {k: v.value for k, v in self.outputs.items()}

    def feature_values(self):
        return {k: v.value for k, v in self.features.items()}


class LayeredModel:
    """Base class for every network in the package.

    ``modules`` maps a module name to a dict of parameter arrays. Module order
    is insertion order and is the enumeration order used by the probe and by
    checkpoints. Subclasses implement :meth:`_forward` and declare
    ``config`` keys ``input_width``, ``layer_count`` and ``feature_dim``.
    """

    architecture = "abstract"
    output_names: tuple = ()

    def __init__(self, modules, config):
        self.modules = {name: dict(block) for name, block in modules.items()}
        self.config = dict(config)

    @property
    def input_width(self):
        return self.config["input_width"]

    @property
    def layer_count(self):
        return self.config["layer_count"]

    @property
    def feature_dim(self):
        return self.config["feature_dim"]

    @property
    def dtype(self):
        for _, arr in self.parameters():
            return arr.dtype
        return np.dtype(np.float64)

    def module_names(self):
        return list(self.modules)

    def module_index(self, name):
        try:
            return self.module_names().index(name)
        except ValueError:
            raise ConfigurationError(f"unknown module {name!r}") from None

    def parameters(self):
        for module, block in self.modules.items():
            for name, arr in block.items():
                yield (module, name), arr

    def num_parameters(self, modules=None):
        names = self.module_names() if modules is None else modules
        return int(sum(arr.size for name in names for arr in self.modules[name].values()))

    def copy(self):
        return type(self)({m: {n: a.copy() for n, a in b.items()} for m, b in self.modules.items()},
                          copy.deepcopy(self.config))

    def replace_module(self, name, block):
        """Shallow copy sharing every array except those of ``name``."""
        if name not in self.modules:
            raise ConfigurationError(f"unknown module {name!r}")
        old = self.modules[name]
        if set(block) != set(old) or any(block[k].shape != old[k].shape for k in old):
            raise ConfigurationError(f"replacement block for {name!r} does not match its shapes")
        new = type(self).__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.modules = dict(self.modules)
        new.modules[name] = dict(block)
        return new

    def astype(self, dtype):
        return type(self)({m: {n: a.astype(dtype) for n, a in b.items()} for m, b in self.modules.items()},
                          copy.deepcopy(self.config))

    def fingerprint(self):
        """SHA-256 over module names, parameter names, shapes and bytes."""
        h = hashlib.sha256()
        for (module, name), arr in self.parameters():
            h.update(f"{module}/{name}/{arr.shape}/{arr.dtype.str}".encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def forward(self, x, capture=()):
        """Run the network on ``x`` (last axis = input width).

        Returns a :class:`ForwardResult` with one entry per output head and
        one feature array per requested layer index in ``capture``.
        """
        xv = x.value if isinstance(x, ad.Var) else np.asarray(x)
        if xv.ndim == 0 or xv.shape[-1] != self.input_width:
            raise ConfigurationError(
                f"input width {xv.shape[-1] if xv.ndim else 0} != model input width {self.input_width}")
        capture = set(capture)
        bad = [c for c in capture if not 1 <= c <= self.layer_count]
        if bad:
            raise ConfigurationError(f"capture indices {sorted(bad)} outside 1..{self.layer_count}")
        if not isinstance(x, ad.Var):
            x = ad.Var(xv.astype(self.dtype, copy=False))
        params = {m: {n: ad.parameter(a, (m, n)) for n, a in b.items()} for m, b in self.modules.items()}
        return self._forward(params, x, capture)

    def predict(self, x):
        return self.forward(x).output_values()

    def probe_session(self, x):
        """Evaluator of every output on a fixed input with one module swapped.

        Subclasses may override it to reuse work shared between evaluations;
        results must match a full forward of the swapped model.
        """
        return ProbeSession(self, x)

    def _forward(self, p, x, capture):
        raise NotImplementedError


class ProbeSession:
    """Reference implementation: one full forward per evaluation."""

    def __init__(self, model, x):
        self.model = model
        self.x = x
        self.reference = model.predict(x)

    def outputs(self, module, block):
        return self.model.replace_module(module, block).predict(self.x)


@register_architecture
class DenseStack(LayeredModel):
    """Plain stack of dense layers with a single ``output`` head.

    Hidden layers use ``activation``; the last layer is linear. Layer ``i``
    lives in module ``layer{i}``; its post-activation value is feature ``i``.
    """

    architecture = "dense_stack"
    output_names = ("output",)

    @classmethod
    def build(cls, widths, activation="tanh", bias=True, seed=0):
        if len(widths) < 2:
            raise ConfigurationError("a dense stack needs at least input and output widths")
        if activation not in layers.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(seed)
        modules = {f"layer{i + 1}": layers.init_dense(rng, a, b, bias=bias)
                   for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))}
        config = {"widths": list(widths), "activation": activation, "bias": bias,
                  "input_width": widths[0], "layer_count": len(widths) - 1,
                  "feature_dim": max(widths[1:])}
        return cls(modules, config)

    def _forward(self, p, x, capture):
        act = layers.ACTIVATIONS[self.config["activation"]]
        n = self.layer_count
        feats = {}
        h = x
        for i in range(1, n + 1):
            h = layers.dense(h, p[f"layer{i}"])
            if i < n:
                h = act(h)
            if i in capture:
                feats[i] = h
        return ForwardResult({"output": h}, feats)


def sgd_step(model, gradients, lr):
    """Plain SGD: ``theta <- theta - lr * g`` for every gradient given.

    Arrays are replaced rather than updated in place so views created with
    :meth:`LayeredModel.replace_module` never see the update.
    """
    for (module, name), g in gradients.items():
        if module not in model.modules or name not in model.modules[module]:
            raise ConfigurationError(f"gradient for unknown parameter {module}/{name}")
        arr = model.modules[module][name]
        if g.shape != arr.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {arr.shape} for {module}/{name}")
        if lr:
            model.modules[module][name] = arr - lr * g
    return model
