import numpy as np
import pytest

from cmm.errors import ConfigurationError, ParseError, UsageError
from cmm.netcore import DenseStack, Tape, autodiff as ad, checkpoint_bytes, layers, loads_checkpoint, sgd_step

H = 1e-6
TOL = 1e-4


def _rel(a, b):
    # entries that are zero by construction (e.g. key bias under softmax) only get an absolute check
    if max(abs(a), abs(b)) < 1e-6:
        return 0.0 if abs(a - b) < 1e-8 else float("inf")
    return abs(a - b) / max(abs(a), abs(b))


def gradcheck(loss_fn, params, n_probes, rng):
    """Compare tape gradients with central differences at ``n_probes`` random entries.

    Returns the worst relative error.
    """
    with Tape() as tape:
        pv = {k: ad.parameter(v, k) for k, v in params.items()}
        loss = loss_fn(pv)
    grads = tape.gradient(loss)
    keys = list(params)
    worst = 0.0
    for _ in range(n_probes):
        k = keys[rng.integers(len(keys))]
        idx = tuple(rng.integers(s) for s in params[k].shape)
        orig = params[k][idx]
        params[k][idx] = orig + H
        up = float(loss_fn({kk: ad.constant(v) for kk, v in params.items()}).value)
        params[k][idx] = orig - H
        down = float(loss_fn({kk: ad.constant(v) for kk, v in params.items()}).value)
        params[k][idx] = orig
        worst = max(worst, _rel(grads[k][idx], (up - down) / (2 * H)))
    return worst


def _proj(out, rng):
    r = rng.standard_normal(out.shape)
    return lambda y: ad.sum_(ad.mul(y, r))


LAYERS = ("dense", "layer_norm", "self_attention", "mlp", "tanh", "relu", "softmax", "mse", "concat_getitem")


def layer_case(layer, rng):
    """``(fn, params)`` for one layer type on a random small instance."""
    d = 6
    x = rng.standard_normal((3, 4, d))
    if layer == "dense":
        params = {("p", "weight"): rng.standard_normal((d, 5)), ("p", "bias"): rng.standard_normal(5),
                  ("x", "x"): x}
        fn = lambda p: layers.dense(p[("x", "x")], {"weight": p[("p", "weight")], "bias": p[("p", "bias")]})
    elif layer == "layer_norm":
        params = {("p", "gamma"): rng.standard_normal(d), ("p", "beta"): rng.standard_normal(d), ("x", "x"): x}
        fn = lambda p: ad.layer_norm(p[("x", "x")], p[("p", "gamma")], p[("p", "beta")])
    elif layer in ("self_attention", "mlp"):
        raw = layers.init_attention(rng, d) if layer == "self_attention" else layers.init_mlp(rng, d, 7)
        params = {("p", k): v + 0.1 * rng.standard_normal(v.shape) for k, v in raw.items()}
        params[("x", "x")] = x
        op = layers.self_attention if layer == "self_attention" else layers.mlp
        fn = lambda p: op(p[("x", "x")], {k[1]: v for k, v in p.items() if k[0] == "p"})
    elif layer == "tanh":
        params = {("x", "x"): x}
        fn = lambda p: ad.tanh(p[("x", "x")])
    elif layer == "relu":
        # keep inputs away from the kink
        params = {("x", "x"): np.sign(x) * (0.1 + np.abs(x))}
        fn = lambda p: ad.relu(p[("x", "x")])
    elif layer == "softmax":
        params = {("x", "x"): x}
        fn = lambda p: ad.softmax(p[("x", "x")])
    elif layer == "mse":
        t = rng.standard_normal(x.shape)
        params = {("x", "x"): x}
        fn = lambda p: ad.mul(ad.mse(p[("x", "x")], t), np.ones(()))
    else:
        params = {("x", "a"): x, ("x", "b"): rng.standard_normal((3, 4, 2))}
        fn = lambda p: ad.getitem(ad.concat([p[("x", "a")], p[("x", "b")]]), (slice(None), slice(1, 3)))
    return fn, params


def check_layer(layer, n_probes=120, seed=None):
    """Worst relative gradient error of ``layer`` over ``n_probes`` random entries."""
    rng = np.random.default_rng(LAYERS.index(layer) if seed is None else seed)
    fn, params = layer_case(layer, rng)
    out = fn({k: ad.constant(v) for k, v in params.items()})
    proj = _proj(out.value, rng)
    return gradcheck(lambda p: proj(fn(p)), params, n_probes, rng)


@pytest.mark.parametrize("layer", LAYERS)
def test_layer_gradients_match_finite_differences(layer):
    worst = check_layer(layer)
    assert worst < TOL, f"{layer}: worst relative error {worst:.2e}"


def check_teacher_blocks(n_probes=150, seed=3):
    from cmm.teacher import TeacherConfig, TeacherNet
    rng = np.random.default_rng(seed)
    net = TeacherNet.build(TeacherConfig(layer_count=3, feature_dim=8, mlp_hidden=8,
                                         head_taps={"mid_price": 1, "spread": 2, "total_volume": 3}), seed=1)
    x = rng.standard_normal((2, 8, net.input_width))
    params = {k: a.copy() for k, a in net.parameters()}

    def loss_fn(p):
        nested = {}
        for (m, n), v in p.items():
            nested.setdefault(m, {})[n] = v
        out = net._forward(nested, ad.constant(x), set())
        return ad.sum_(ad.add(ad.add(out.outputs["mid_price"], out.outputs["spread"]), out.outputs["total_volume"]))

    return gradcheck(loss_fn, params, n_probes, rng)


def test_teacher_block_gradients_match_finite_differences():
    assert check_teacher_blocks() < TOL


def test_tape_reports_zero_for_unused_parameter_and_refuses_reuse():
    with Tape() as tape:
        a = ad.parameter(np.ones(3), "a")
        ad.parameter(np.ones(2), "b")
        loss = ad.sum_(ad.mul(a, 2.0))
    g = tape.gradient(loss)
    np.testing.assert_array_equal(g["a"], [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(g["b"], [0.0, 0.0])
    with pytest.raises(UsageError):
        tape.gradient(loss)


def test_broadcast_gradients_are_reduced_to_parameter_shape():
    with Tape() as tape:
        b = ad.parameter(np.zeros(4), "b")
        loss = ad.sum_(ad.add(ad.constant(np.ones((5, 4))), b))
    np.testing.assert_array_equal(tape.gradient(loss)["b"], np.full(4, 5.0))


def test_checkpoint_round_trip_is_bit_exact():
    net = DenseStack.build([5, 7, 3], seed=2)
    data = checkpoint_bytes(net, {"note": "x"})
    back, extra = loads_checkpoint(data)
    assert extra == {"note": "x"}
    assert back.fingerprint() == net.fingerprint()
    assert checkpoint_bytes(back, extra) == data
    x = np.random.default_rng(0).standard_normal((4, 5))
    np.testing.assert_array_equal(back.predict(x)["output"], net.predict(x)["output"])


@pytest.mark.parametrize("mutate, message", [
    (lambda d: b"XXXXXXXX" + d[8:], "magic"),
    (lambda d: d[:-8], "truncated"),
    (lambda d: d + b"\0", "trailing"),
])
def test_corrupt_checkpoints_are_rejected(mutate, message):
    data = checkpoint_bytes(DenseStack.build([2, 3], seed=0))
    with pytest.raises(ParseError, match=message):
        loads_checkpoint(mutate(data))


def test_replace_module_leaves_original_untouched():
    net = DenseStack.build([3, 4, 2], seed=0)
    before = net.fingerprint()
    block = {k: v + 1.0 for k, v in net.modules["layer1"].items()}
    view = net.replace_module("layer1", block)
    assert net.fingerprint() == before
    assert view.modules["layer2"]["weight"] is net.modules["layer2"]["weight"]
    with pytest.raises(ConfigurationError):
        net.replace_module("layer1", {"weight": np.zeros((2, 2)), "bias": np.zeros(4)})


def test_sgd_step_moves_against_gradient_and_checks_shapes():
    net = DenseStack.build([2, 1], seed=0)
    w = net.modules["layer1"]["weight"].copy()
    sgd_step(net, {("layer1", "weight"): np.ones_like(w)}, 0.5)
    np.testing.assert_allclose(net.modules["layer1"]["weight"], w - 0.5)
    with pytest.raises(ConfigurationError):
        sgd_step(net, {("layer1", "weight"): np.ones(3)}, 0.1)


def test_forward_rejects_wrong_width_and_capture():
    net = DenseStack.build([3, 4, 2], seed=0)
    with pytest.raises(ConfigurationError):
        net.forward(np.zeros((2, 5)))
    with pytest.raises(ConfigurationError):
        net.forward(np.zeros((2, 3)), capture=(3,))


def test_identity_dense_layer_passes_input_through():
    net = DenseStack.build([4, 4], seed=0)
    net.modules["layer1"]["weight"] = np.eye(4)
    net.modules["layer1"]["bias"] = np.zeros(4)
    x = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(net.predict(x)["output"], x)


def test_capturing_every_layer_yields_one_feature_per_layer():
    net = DenseStack.build([3] + [5] * 6, seed=0)
    res = net.forward(np.ones((2, 3)), capture=range(1, 7))
    assert sorted(res.features) == [1, 2, 3, 4, 5, 6]


def test_zero_weight_bias_free_model_outputs_zero():
    net = DenseStack.build([3, 5, 2], bias=False, seed=0)
    for block in net.modules.values():
        block["weight"] = np.zeros_like(block["weight"])
    assert not np.any(net.predict(np.random.default_rng(0).standard_normal((4, 3)))["output"])


def test_squared_error_gradient_is_residual_outer_input():
    rng = np.random.default_rng(1)
    w0, x, y = rng.standard_normal((2, 3)), rng.standard_normal((3, 1)), rng.standard_normal((2, 1))
    with Tape() as tape:
        w = ad.parameter(w0, "w")
        r = ad.sub(ad.matmul(w, x), y)
        loss = ad.mul(ad.sum_(ad.mul(r, r)), 0.5)
    np.testing.assert_allclose(tape.gradient(loss)["w"], (w0 @ x - y) @ x.T, rtol=1e-12)

    v = x[:, 0]
    with Tape() as tape:
        w = ad.parameter(w0, "w")
        u = ad.parameter(v, "u")
        out = ad.matmul(w, u)
        loss = ad.sum_(ad.mul(ad.matmul(u, w.value.T), out))
    assert out.value.shape == (2,)
    g = tape.gradient(loss)
    np.testing.assert_allclose(g["w"], np.outer(w0 @ v, v), rtol=1e-12)
    np.testing.assert_allclose(g["u"], 2 * w0.T @ (w0 @ v), rtol=1e-12)
    with pytest.raises(ConfigurationError):
        ad.matmul(w0, np.float64(2.0))


def test_constant_loss_gives_zero_gradients():
    with Tape() as tape:
        w = ad.parameter(np.ones((2, 2)), "w")
        loss = ad.add(ad.mul(ad.sum_(w), 0.0), 3.0)
    assert not np.any(tape.gradient(loss)["w"])


def test_sgd_arithmetic_and_zero_learning_rate():
    net = DenseStack.build([1, 1], seed=0)
    net.modules["layer1"]["weight"] = np.array([[1.0]])
    sgd_step(net, {("layer1", "weight"): np.array([[0.5]])}, 0.1)
    assert net.modules["layer1"]["weight"][0, 0] == pytest.approx(0.95, abs=1e-15)
    before = net.fingerprint()
    sgd_step(net, {("layer1", "weight"): np.array([[0.5]])}, 0.0)
    assert net.fingerprint() == before


def test_sgd_descends_a_quadratic_bowl_monotonically():
    net = DenseStack.build([1, 2], bias=False, seed=0)
    net.modules["layer1"]["weight"] = np.array([[3.0, -2.0]])
    scale = np.array([1.0, 4.0])
    losses = []
    for _ in range(200):
        with Tape() as tape:
            w = ad.parameter(net.modules["layer1"]["weight"], ("layer1", "weight"))
            loss = ad.sum_(ad.mul(ad.mul(w, w), scale))
        losses.append(float(loss.value))
        sgd_step(net, tape.gradient(loss), 0.05)
    # closed form: each coordinate shrinks by |1 - 2 * lr * scale| per step
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))
    np.testing.assert_allclose(net.modules["layer1"]["weight"], [[3.0 * 0.9 ** 200, -2.0 * 0.6 ** 200]], rtol=1e-9)
