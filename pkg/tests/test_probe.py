import numpy as np
import pytest

from cmm.errors import ConfigurationError
from cmm.netcore import DenseStack
from cmm.probe import (AttributionResult, ParallelBranches, ProbeConfig, argmax_map, module_noise, normalize_delta,
                       output_delta, perturb_module, probe_teacher, run_probe, sample_noise)
from cmm.teacher import TASKS


def test_uniform_noise_mean_is_near_zero():
    x = sample_noise("uniform", (10**6,), np.random.default_rng(0))
    assert abs(x.mean()) < 0.005
    assert x.min() >= -1 and x.max() <= 1


def test_gaussian_noise_variance_is_near_one():
    x = sample_noise("gaussian", (10**6,), np.random.default_rng(1))
    assert abs(x.var() - 1.0) < 0.01


def test_same_rng_state_gives_identical_noise():
    a = sample_noise("gaussian", (5, 3), np.random.default_rng(7))
    b = sample_noise("gaussian", (5, 3), np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ConfigurationError):
        sample_noise("cauchy", (2,), np.random.default_rng(0))


def _net():
    return DenseStack.build([4, 6, 2], seed=3)


def test_zero_amplitude_leaves_outputs_unchanged():
    net = _net()
    x = np.random.default_rng(0).standard_normal((8, 4))
    eps = module_noise(net, "layer1", "gaussian", np.random.default_rng(1))
    view = perturb_module(net, "layer1", eps, 0.0)
    np.testing.assert_array_equal(view.predict(x)["output"], net.predict(x)["output"])
    assert output_delta(net, view, x, "output") == 0.0


def test_perturbation_is_local_and_never_touches_the_original():
    net = _net()
    before = net.fingerprint()
    eps = module_noise(net, "layer1", "uniform", np.random.default_rng(2))
    view = perturb_module(net, "layer1", eps, 0.5)
    for k in net.modules["layer2"]:
        np.testing.assert_array_equal(view.modules["layer2"][k], net.modules["layer2"][k])
    assert not np.array_equal(view.modules["layer1"]["weight"], net.modules["layer1"]["weight"])
    assert net.fingerprint() == before


def test_unknown_module_is_an_error():
    net = _net()
    with pytest.raises(ConfigurationError, match="unknown module"):
        module_noise(net, "layer9", "gaussian", np.random.default_rng(0))
    with pytest.raises(ConfigurationError, match="unknown module"):
        run_probe(net, np.zeros((2, 4)), ProbeConfig(trials_per_cell=1), modules=("layer9",))


def test_single_layer_delta_matches_hand_calculation():
    net = DenseStack.build([3, 1], seed=0)
    x = np.array([[1.0, -2.0, 0.5]])
    dw = np.array([[0.1], [0.2], [-0.4]])
    eps = {"weight": dw, "bias": np.array([0.3])}
    view = perturb_module(net, "layer1", eps, 0.5)
    expected = abs(0.5 * (1.0 * 0.1 - 2.0 * 0.2 + 0.5 * -0.4 + 0.3))
    assert output_delta(net, view, x, "output") == pytest.approx(expected, rel=1e-12)


def test_delta_normalization_arithmetic():
    assert normalize_delta(0.5, 0.1, 0.9) == pytest.approx(0.5)
    assert normalize_delta(0.0, 0.1, 0.9) < 0


def test_attribution_map_is_column_argmax():
    assert argmax_map([[0.9, 0.1], [0.2, 0.8]]) == (0, 1)
    assert argmax_map([[0.5, 0.5], [0.5, 0.5]]) == (0, 0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ProbeConfig(amplitude_ranges=((0.1, 0.1),)).validate()
    with pytest.raises(ConfigurationError):
        ProbeConfig(noise_distributions=("laplace",)).validate()
    assert ProbeConfig().scaled(10).amplitude_ranges == ((0.01, 0.1), (0.1, 1.0))


@pytest.mark.parametrize("seed", range(5))
def test_block_diagonal_network_recovers_identity(seed):
    net = ParallelBranches.build(seed=seed)
    x = np.random.default_rng(seed + 100).standard_normal((64, 4))
    res = run_probe(net, x, ProbeConfig(seed=seed))
    assert res.C == (0, 1, 2)
    # off-diagonal modules move nothing, so their normalized influence is exactly -a_min/(a_max-a_min)
    assert np.all(res.raw_delta[~np.eye(3, dtype=bool)] == 0.0)
    assert isinstance(res, AttributionResult)


def test_probe_is_deterministic_for_a_seed():
    net = ParallelBranches.build(seed=1)
    x = np.random.default_rng(0).standard_normal((16, 4))
    a = run_probe(net, x, ProbeConfig(trials_per_cell=2, seed=4))
    b = run_probe(net, x, ProbeConfig(trials_per_cell=2, seed=4))
    np.testing.assert_array_equal(a.S, b.S)


def test_teacher_session_matches_full_forward(small_teacher):
    model, _ = small_teacher
    net = model.net
    x = np.random.default_rng(3).standard_normal((12, 8, 22))
    session = net.probe_session(x)
    rng = np.random.default_rng(4)
    for module in ("embedding", "block1", "block3", "block6"):
        eps = module_noise(net, module, "gaussian", rng)
        view = perturb_module(net, module, eps, 0.05)
        fast = session.outputs(module, view.modules[module])
        full = view.predict(x)
        for t in TASKS:
            np.testing.assert_allclose(fast[t], full[t], rtol=0, atol=1e-12)


def test_head_isolated_from_perturbed_block_has_zero_delta(small_teacher):
    model, _ = small_teacher
    net = model.net
    x = np.random.default_rng(5).standard_normal((12, 8, 22))
    eps = module_noise(net, "block5", "gaussian", np.random.default_rng(6))
    view = perturb_module(net, "block5", eps, 0.1)
    assert output_delta(net, view, x, "mid_price") == 0.0
    assert output_delta(net, view, x, "spread") == 0.0
    assert output_delta(net, view, x, "total_volume") > 0.0


def test_probe_teacher_reports_a_band_per_task(small_teacher):
    model, _ = small_teacher
    x = np.random.default_rng(7).standard_normal((32, 8, 22))
    res, bands = probe_teacher(model, x, ProbeConfig(trials_per_cell=1))
    assert set(bands) == set(TASKS)
    assert set(bands.values()) <= {"shallow", "middle", "deep"}
    assert res.S.shape == (len(model.net.modules), 3)
