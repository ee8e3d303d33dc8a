import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from cmm.errors import ConfigurationError
from cmm.hajek import (Ensemble, FusionConfig, KernelNet, consensus, degenerate, fuse, fuse_reference, hajek_score,
                       project, task_weights, train_kernel)
from cmm.netcore import checkpoint_bytes
from cmm.ofdd import ExpertModel, ExpertSpec, StudentNet
from cmm.teacher import TASKS

WIDTH, HIDDEN = 12, 6
BANDS = {"mid_price": "shallow", "spread": "middle", "total_volume": "deep"}


def _expert(task, regime="low", seed=0, band=None):
    spec = ExpertSpec.make(band or BANDS[task], task, regime)
    return ExpertModel(spec, StudentNet.build(WIDTH, HIDDEN, 4, seed), None, 1)


def _grid(seed=0):
    return [_expert(t, r, seed=seed * 100 + 10 * i + j) for i, r in enumerate(("low", "medium", "high"))
            for j, t in enumerate(TASKS)]


def _kernel(seed=0):
    return KernelNet.build(HIDDEN + 1, 8, seed)


# --- consensus, projection, score ---

def test_consensus_of_two_vectors():
    np.testing.assert_array_equal(consensus([[0, 0, 1], [2, 0, 3]]), [1, 0, 2])


def test_consensus_of_identical_and_single_experts():
    e = np.array([0.3, -1.2, 4.0])
    np.testing.assert_array_equal(consensus([e] * 5), e)
    np.testing.assert_array_equal(consensus([e]), e)
    with pytest.raises(ConfigurationError):
        consensus([])


def test_zero_kernel_projects_to_origin_and_projection_is_pure():
    k = _kernel()
    zero = k.replace_module("layer2", {n: np.zeros_like(a) for n, a in k.modules["layer2"].items()})
    e = np.random.default_rng(0).standard_normal((5, HIDDEN + 1))
    np.testing.assert_array_equal(project(zero, e), np.zeros((5, 2)))
    np.testing.assert_array_equal(project(k, e), project(k, e))
    with pytest.raises(ConfigurationError):
        project(k, np.zeros(HIDDEN))


def test_identical_experts_share_the_consensus_projection():
    k = _kernel(1)
    e = np.random.default_rng(1).standard_normal(HIDDEN + 1)
    v_avg = project(k, consensus([e] * 4))
    np.testing.assert_array_equal(project(k, e), v_avg)


def test_score_hand_values():
    assert hajek_score([3.0, 4.0], [0.0, 2.0]) == 4.0
    assert hajek_score([1.0, 0.0], [0.0, 3.0]) == 0.0
    assert hajek_score([3.0, 4.0], [3.0, 4.0]) == pytest.approx(5.0, rel=1e-15)


def test_degenerate_consensus_scores_zero_and_is_flagged():
    assert hajek_score([3.0, 4.0], [1e-13, 0.0]) == 0.0
    assert degenerate([1e-13, 0.0]) and not degenerate([0.0, 1e-6])


@given(v=hnp.arrays(float, (2,), elements=st.floats(-1e3, 1e3)), u=hnp.arrays(float, (2,), elements=st.floats(-1e3, 1e3)))
def test_score_is_scalar_projection(v, u):
    n = np.linalg.norm(u)
    expected = 0.0 if n < 1e-12 else float(v @ u) / n
    assert hajek_score(v, u) == pytest.approx(expected, rel=1e-12, abs=1e-9)


# --- weights ---

@given(scores=hnp.arrays(float, st.tuples(st.integers(1, 50), st.integers(1, 6)), elements=st.floats(-1e6, 1e6)),
       tau=st.floats(1e-3, 100), bias=st.floats(0, 10), mode=st.sampled_from(["softmax", "clamped-linear"]))
def test_weights_are_a_distribution(scores, tau, bias, mode):
    paired = np.zeros(scores.shape[1], bool)
    paired[0] = True
    w = task_weights(scores, paired, FusionConfig(temperature=tau, pair_bias=bias, score_mode=mode))
    assert np.all(np.isfinite(w)) and np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_equal_scores_without_bias_split_evenly():
    w = task_weights(np.array([0.7, 0.7]), [True, False], FusionConfig(pair_bias=0.0))
    np.testing.assert_allclose(w, [0.5, 0.5], rtol=0, atol=1e-15)


def test_clamped_linear_falls_back_to_uniform():
    cfg = FusionConfig(score_mode="clamped-linear")
    np.testing.assert_allclose(task_weights(np.array([-1.0, -2.0]), [True, False], cfg), [0.5, 0.5])
    np.testing.assert_allclose(task_weights(np.array([3.0, 1.0, -1.0]), [True, False, False], cfg), [0.75, 0.25, 0.0])


# --- fusion ---

def test_single_expert_per_task_gets_full_weight():
    experts = [_expert(t, seed=i) for i, t in enumerate(TASKS)]
    x = np.random.default_rng(0).standard_normal((7, WIDTH))
    ens = Ensemble(experts, _kernel(), FusionConfig())
    z, tr = ens.fuse_z(x, trace=True)
    for k, (t, e) in enumerate(zip(TASKS, experts)):
        assert np.all(tr.weights[t] == 1.0)
        np.testing.assert_array_equal(z[:, k], e.predict(x)[0])


def test_identical_experts_fuse_to_their_common_prediction():
    experts = []
    for t in TASKS:
        base = _expert(t, seed=TASKS.index(t))
        for r in ("low", "medium", "high"):
            experts.append(ExpertModel(ExpertSpec.make(BANDS[t], t, r), base.net, None, 1))
    x = np.random.default_rng(1).standard_normal((200, WIDTH))
    z = Ensemble(experts, _kernel(2), FusionConfig()).fuse_z(x)
    for k, t in enumerate(TASKS):
        common = experts[3 * k].predict(x)[0]
        np.testing.assert_allclose(z[:, k], common, rtol=0, atol=1e-12)


def test_two_experts_with_equal_scores_average():
    a, b = _expert("mid_price", seed=1), _expert("mid_price", seed=2, band="middle")
    rest = [_expert("spread", seed=3), _expert("total_volume", seed=4)]
    k = _kernel()
    # a kernel that ignores its input gives every expert the same score
    flat = k.replace_module("layer1", {n: np.zeros_like(v) for n, v in k.modules["layer1"].items()})
    x = np.random.default_rng(2).standard_normal((5, WIDTH))
    z, tr = Ensemble([a, b] + rest, flat, FusionConfig(pair_bias=0.0)).fuse_z(x, trace=True)
    np.testing.assert_allclose(tr.weights["mid_price"], 0.5, rtol=0, atol=1e-15)
    np.testing.assert_allclose(z[:, 0], 0.5 * (a.predict(x)[0] + b.predict(x)[0]), rtol=0, atol=1e-12)


def test_small_temperature_selects_the_top_scored_expert():
    experts = _grid(3)
    ens = Ensemble(experts, _kernel(4), FusionConfig(temperature=0.01, pair_bias=0.0))
    x = np.random.default_rng(3).standard_normal((50, WIDTH))
    z, tr = ens.fuse_z(x, trace=True)
    _, preds = ens.expert_vectors(x)
    checked = 0
    for k, t in enumerate(TASKS):
        g = ens.groups[t]
        s = tr.scores[:, g]
        top = np.sort(s, axis=1)
        clear = (top[:, -1] - top[:, -2]) > 0.2
        best = g[np.argmax(s, axis=1)]
        picked = preds[np.arange(len(x)), best]
        np.testing.assert_allclose(z[clear, k], picked[clear], rtol=0, atol=1e-6)
        checked += clear.sum()
    assert checked > 20


def test_batched_ensemble_matches_expert_by_expert_reference():
    experts = _grid(5)
    k = _kernel(6)
    cfg = FusionConfig(temperature=0.7, pair_bias=0.5)
    ens = Ensemble(experts, k, cfg)
    x = np.random.default_rng(4).standard_normal((30, WIDTH))
    z = ens.fuse_z(x)
    for i in range(len(x)):
        ref = fuse_reference(experts, k, cfg, x[i])
        np.testing.assert_allclose(z[i], [ref[t] for t in TASKS], rtol=1e-12, atol=1e-12)
        tr = fuse(ens, None, None, x[i])
        np.testing.assert_allclose(tr.fused, z[i], rtol=0, atol=1e-12)


def test_random_kernel_weights_sum_to_one_on_many_inputs():
    ens = Ensemble(_grid(7), _kernel(8), FusionConfig())
    x = np.random.default_rng(5).standard_normal((10**4, WIDTH)) * 3
    _, tr = ens.fuse_z(x, trace=True)
    for w in tr.weights.values():
        assert np.all(np.isfinite(w))
        np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_trace_lines_are_one_json_object_per_decision():
    import json
    ens = Ensemble(_grid(1), _kernel(1), FusionConfig())
    _, tr = ens.fuse_z(np.zeros((3, WIDTH)), trace=True)
    recs = [json.loads(line) for line in tr.lines()]
    assert len(recs) == 3 and set(recs[0]) >= {"V", "V_avg", "C", "w", "fused_z", "degenerate"}


def test_ensemble_construction_errors():
    with pytest.raises(ConfigurationError):
        Ensemble([], _kernel())
    with pytest.raises(ConfigurationError, match="no expert for task"):
        Ensemble([_expert("mid_price")], _kernel())
    with pytest.raises(ConfigurationError):
        Ensemble(_grid(), KernelNet.build(HIDDEN, 8, 0))


def _kernel_data(n=600, seed=0):
    experts = _grid(seed)
    x = np.random.default_rng(seed).standard_normal((n, WIDTH))
    ens = Ensemble(experts, _kernel(), FusionConfig())
    _, preds = ens.expert_vectors(x)
    # target: the medium-regime expert of each task, which the kernel can learn to favour
    target = np.stack([preds[:, ens.groups[t][1]] for t in TASKS], axis=1)
    return experts, x, target


def test_kernel_training_is_deterministic_and_reduces_error():
    experts, x, target = _kernel_data()
    cfg = FusionConfig(epochs=15, seed=3)
    k1, c1 = train_kernel(experts, x, target, cfg)
    k2, _ = train_kernel(experts, x, target, cfg)
    assert checkpoint_bytes(k1) == checkpoint_bytes(k2)
    before = ((Ensemble(experts, KernelNet.build(HIDDEN + 1, cfg.kernel_hidden, 0), cfg).fuse_z(x) - target) ** 2).mean()
    after = ((Ensemble(experts, k1, cfg).fuse_z(x) - target) ** 2).mean()
    assert after < before


def test_fusion_config_validation():
    for bad in (dict(temperature=0.0), dict(pair_bias=-1.0), dict(score_mode="max"), dict(validation_fraction=1.0)):
        with pytest.raises(ConfigurationError):
            FusionConfig(**bad).validate()
