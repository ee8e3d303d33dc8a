"""Tape-based reverse-mode differentiation over numpy arrays.

Values are wrapped in :class:`Var`. When a :class:`Tape` is active, every
operation whose inputs are tracked appends a node holding a closure that maps
the output gradient to input gradients. Outside a tape the same code runs as
plain numpy with a thin wrapper, which is what inference uses.

Example:
    >>> w = np.array([[2.0]])
    >>> with Tape() as tape:
    ...     wv = parameter(w, ("dense", "weight"))
    ...     loss = (constant(np.array([[3.0]])) @ wv).sum()
    >>> tape.gradient(loss)[("dense", "weight")]
    array([[3.]])
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, UsageError

_ACTIVE: list["Tape"] = []


def _current():
    return _ACTIVE[-1] if _ACTIVE else None


class Var:
    """An array value, optionally registered on a tape."""

    __slots__ = ("value", "parents", "backward", "key", "tape", "idx")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), backward=None, key=None):
        self.value = value
        self.parents = parents
        self.backward = backward
        self.key = key
        self.tape = None
        self.idx = -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, tracked={self.tape is not None})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Records operations for one forward pass; consumed by :meth:`gradient`."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.watched: list[Var] = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise UsageError("gradient tape has already been consumed")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def _register(self, var):
        var.tape = self
        var.idx = len(self.nodes)
        self.nodes.append(var)

    def watch(self, var):
        """Track a leaf so that :meth:`gradient` reports its gradient."""
        if var.tape is not self:
            self._register(var)
            if var.key is not None:
                self.watched.append(var)
        return var

    def gradient(self, loss, seed=None):
        """Backpropagate from ``loss`` and return ``{key: gradient}``.

        Every watched leaf gets an entry, zero when the loss does not depend
        on it. ``seed`` is the upstream gradient (ones by default).
        """
        if self.consumed:
            raise UsageError("gradient tape has already been consumed")
        self.consumed = True
        if not isinstance(loss, Var):
            raise UsageError("loss must be a Var produced under this tape")
        grads = [None] * len(self.nodes)
        if loss.tape is self:
            g0 = np.ones_like(loss.value) if seed is None else np.asarray(seed, dtype=loss.value.dtype)
            if g0.shape != loss.value.shape:
                raise UsageError(f"seed shape {g0.shape} != loss shape {loss.value.shape}")
            grads[loss.idx] = g0
            nodes = self.nodes
            for i in range(loss.idx, -1, -1):
                g = grads[i]
                if g is None:
                    continue
                node = nodes[i]
                if node.backward is None:
                    continue
                for parent, pg in zip(node.parents, node.backward(g)):
                    if pg is None or parent.tape is not self:
                        continue
                    j = parent.idx
                    grads[j] = pg if grads[j] is None else grads[j] + pg
        out = {}
        for var in self.watched:
            g = grads[var.idx]
            g = np.zeros_like(var.value) if g is None else np.asarray(g)
            out[var.key] = out[var.key] + g if var.key in out else g
        self.nodes = []
        return out


def parameter(value, key):
    """Leaf for a trainable array; watched by the active tape if any."""
    v = Var(value, key=key)
    tape = _current()
    if tape is not None:
        tape.watch(v)
    return v


def constant(value):
    if isinstance(value, Var):
        return value
    return Var(np.asarray(value, dtype=float) if not isinstance(value, np.ndarray) else value)


def _wrap(x):
    if isinstance(x, Var):
        return x
    if isinstance(x, np.ndarray):
        return Var(x)
    return Var(np.asarray(x, dtype=float))


def _node(value, parents, backward):
    out = Var(value, parents, backward)
    tape = _current()
    if tape is not None:
        for p in parents:
            if p.tape is tape:
                tape._register(out)
                break
    return out


def _tracked(v):
    return v.tape is not None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        return (_unbroadcast(g, a.value.shape) if _tracked(a) else None,
                _unbroadcast(g, b.value.shape) if _tracked(b) else None)

    return _node(a.value + b.value, (a, b), backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        return (_unbroadcast(g, a.value.shape) if _tracked(a) else None,
                _unbroadcast(-g, b.value.shape) if _tracked(b) else None)

    return _node(a.value - b.value, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        return (_unbroadcast(g * b.value, a.value.shape) if _tracked(a) else None,
                _unbroadcast(g * a.value, b.value.shape) if _tracked(b) else None)

    return _node(a.value * b.value, (a, b), backward)


def div(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        ga = _unbroadcast(g / b.value, a.value.shape) if _tracked(a) else None
        gb = _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape) if _tracked(b) else None
        return ga, gb

    return _node(a.value / b.value, (a, b), backward)


def matmul(a, b):
    """``a @ b`` with numpy batching rules, 1-D operands included."""
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim == 0 or b.value.ndim == 0:
        raise ConfigurationError("matmul does not accept scalars")
    if a.value.ndim == 1 or b.value.ndim == 1:
        # promote vectors to matrices as numpy does, then drop the added axes
        a2 = reshape(a, (1, -1)) if a.value.ndim == 1 else a
        b2 = reshape(b, (-1, 1)) if b.value.ndim == 1 else b
        out = matmul(a2, b2)
        shape = out.value.shape
        if a.value.ndim == 1:
            shape = shape[:-2] + shape[-1:]
        if b.value.ndim == 1:
            shape = shape[:-1]
        return reshape(out, shape)
    av, bv = a.value, b.value
    # stacked @ matrix: one GEMM over the flattened leading axes
    flat = bv.ndim == 2 and av.ndim > 2

    def backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if _tracked(a):
                ga = (g2 @ bv.T).reshape(av.shape)
            if _tracked(b):
                gb = av.reshape(-1, av.shape[-1]).T @ g2
            return ga, gb
        if _tracked(a):
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if _tracked(b):
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    if flat:
        out = (av.reshape(-1, av.shape[-1]) @ bv).reshape(av.shape[:-1] + (bv.shape[-1],))
    else:
        out = av @ bv
    return _node(out, (a, b), backward)


def tanh(x):
    x = _wrap(x)
    y = np.tanh(x.value)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x):
    x = _wrap(x)
    mask = x.value > 0
    return _node(x.value * mask, (x,), lambda g: (g * mask,))


def exp(x):
    x = _wrap(x)
    y = np.exp(x.value)
    return _node(y, (x,), lambda g: (g * y,))


def log(x):
    x = _wrap(x)
    return _node(np.log(x.value), (x,), lambda g: (g / x.value,))


def sqrt(x):
    x = _wrap(x)
    y = np.sqrt(x.value)
    return _node(y, (x,), lambda g: (g / (2.0 * y),))


def square(x):
    x = _wrap(x)
    return _node(x.value * x.value, (x,), lambda g: (2.0 * x.value * g,))


def sum_(x, axis=None, keepdims=False):
    x = _wrap(x)
    shape = x.value.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    if axis is None:
        n = x.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.value.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    x = _wrap(x)
    orig = x.value.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def swapaxes(x, a1=-1, a2=-2):
    x = _wrap(x)
    return _node(np.swapaxes(x.value, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, index):
    x = _wrap(x)
    shape, dtype = x.value.shape, x.value.dtype
    basic = _is_basic_index(index)

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _node(x.value[index], (x,), backward)


def concat(xs, axis=-1):
    xs = [_wrap(x) for x in xs]
    sizes = np.cumsum([x.value.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([x.value for x in xs], axis=axis), tuple(xs), backward)


def softmax(x, axis=-1):
    x = _wrap(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gx = gg = gb = None
        if _tracked(gamma):
            gg = _unbroadcast(g * xhat, gamma.value.shape)
        if _tracked(beta):
            gb = _unbroadcast(g, beta.value.shape)
        if _tracked(x):
            gh = g * gamma.value
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _node(xhat * gamma.value + beta.value, (x, gamma, beta), backward)


def mse(pred, target):
    """Mean squared error over all elements."""
    d = sub(pred, target)
    return mean(square(d))

