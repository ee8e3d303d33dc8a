"""Layer functions and their parameter initializers.

Each layer is a pure function of an input :class:`Var` and a dict of
parameter Vars; initializers return the matching dict of numpy arrays.
"""

import math

import numpy as np

from . import autodiff as ad


def init_dense(rng, n_in, n_out, bias=True, scale=None):
    scale = 1.0 / math.sqrt(n_in) if scale is None else scale
    params = {"weight": rng.normal(0.0, scale, size=(n_in, n_out))}
    if bias:
        params["bias"] = np.zeros(n_out)
    return params


def init_layer_norm(dim):
    return {"gamma": np.ones(dim), "beta": np.zeros(dim)}


def init_attention(rng, dim):
    params = {}
    for name in ("query", "key", "value", "out"):
        params[f"w_{name}"] = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, dim))
        params[f"b_{name}"] = np.zeros(dim)
    return params


def init_mlp(rng, dim, hidden):
    return {
        "w_hidden": rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, hidden)),
        "b_hidden": np.zeros(hidden),
        "w_proj": rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, dim)),
        "b_proj": np.zeros(dim),
    }


def dense(x, p, prefix=""):
    y = ad.matmul(x, p[prefix + "weight"])
    bias = p.get(prefix + "bias")
    return y if bias is None else y + bias


def layer_norm(x, p, prefix=""):
    return ad.layer_norm(x, p[prefix + "gamma"], p[prefix + "beta"])


def self_attention(x, p):
    """Single-head scaled dot-product attention over axis -2 of ``x``."""
    dim = x.shape[-1]
    q = x @ p["w_query"] + p["b_query"]
    k = x @ p["w_key"] + p["b_key"]
    v = x @ p["w_value"] + p["b_value"]
    scores = ad.matmul(q, ad.swapaxes(k)) * (1.0 / math.sqrt(dim))
    mixed = ad.matmul(ad.softmax(scores), v)
    return mixed @ p["w_out"] + p["b_out"]


def mlp(x, p):
    return ad.tanh(x @ p["w_hidden"] + p["b_hidden"]) @ p["w_proj"] + p["b_proj"]


ACTIVATIONS = {
    "identity": lambda x: x,
    "tanh": ad.tanh,
    "relu": ad.relu,
}
