import numpy as np
import pytest

from cmm.errors import ConfigurationError, DataError
from cmm.lobsim import DEPTH, MarketSeries, build_ladder, generate_synthetic
from cmm.netcore import checkpoint_bytes
from cmm.teacher import (TASKS, Normalization, TeacherConfig, clamp_prediction, featurize,
                         raw_targets, raw_windows, sample_indices, teacher_predict, train_teacher)


def _constant_series(n=40):
    bid_px = np.tile(100.0 - np.arange(DEPTH), (n, 1))
    ask_px = np.tile(102.0 + np.arange(DEPTH), (n, 1))
    vol = np.full((n, DEPTH), 7.0)
    return MarketSeries(np.arange(n) * 500, bid_px, vol, ask_px, vol, tick_size=1.0)


def test_single_snapshot_window_has_22_features():
    s = generate_synthetic(0, 50)
    assert featurize(s, 10, 1).shape == (1, 22)
    assert featurize(s, 10, 8).shape == (8, 22)


def test_featurize_needs_history():
    with pytest.raises(DataError):
        featurize(generate_synthetic(0, 50), 3, 8)


def test_constant_book_normalizes_to_zero():
    s = _constant_series()
    idx = np.arange(4, len(s) - 1)
    t, ref = raw_targets(s, idx)
    norm = Normalization.fit(raw_windows(s, idx, 4), t, ref, s.tick_size)
    assert np.all(featurize(s, 10, 4, norm) == 0.0)


def test_target_normalization_round_trips():
    s = generate_synthetic(5, 3000)
    idx = sample_indices(s, 8)
    t, ref = raw_targets(s, idx)
    norm = Normalization.fit(raw_windows(s, idx, 8), t, ref, s.tick_size)
    back = norm.targets_from_z(norm.targets_to_z(t, ref), ref)
    np.testing.assert_allclose(back, t, rtol=1e-12, atol=0)


def test_clamp_lifts_negative_spread_to_one_tick():
    _, spread, vol = clamp_prediction(100.0, -1.0, 0.0, 0.5)
    assert spread == 0.5 and vol == 10


def test_config_rejects_unordered_taps():
    with pytest.raises(ConfigurationError):
        TeacherConfig(head_taps={"mid_price": 4, "spread": 2, "total_volume": 6}).validate()
    with pytest.raises(ConfigurationError):
        TeacherConfig(feature_dim=65).validate()


def test_training_needs_enough_samples():
    with pytest.raises(DataError):
        train_teacher(generate_synthetic(0, 1000), TeacherConfig(epochs=0))


def test_features_cover_every_layer_and_predictions_feed_the_ladder(small_teacher):
    model, _ = small_teacher
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1000, 8, 22)) * 3.0
    ref = 5000.0 + rng.normal(0, 50, 1000)
    (mid, spread, vol), feats = teacher_predict(model, x, ref)
    assert sorted(feats) == list(range(1, model.net.layer_count + 1))
    assert all(f.shape == (1000, 8, model.config.feature_dim) for f in feats.values())
    for m, s, v in zip(mid, spread, vol):
        build_ladder(m, s, v, model.normalization.tick_size)


def test_fast_forward_matches_graph_forward(small_teacher):
    model, _ = small_teacher
    x = np.random.default_rng(1).standard_normal((64, 8, 22))
    z, _ = model.predict_z(x)
    np.testing.assert_allclose(model.predict_z_fast(x), z, rtol=0, atol=1e-10)
    np.testing.assert_allclose(model.predict_z_fast(x[0]), z[:1], rtol=0, atol=1e-10)


def test_heads_depend_only_on_blocks_up_to_their_tap(small_teacher):
    model, _ = small_teacher
    x = np.random.default_rng(2).standard_normal((16, 8, 22))
    z, _ = model.predict_z(x)
    net = model.net
    block = {k: v + 0.5 for k, v in net.modules["block5"].items()}
    view = net.replace_module("block5", block)
    out = view.forward(x)
    zp = np.stack([out.outputs[t].value for t in TASKS], axis=1)
    np.testing.assert_array_equal(zp[:, :2], z[:, :2])
    assert np.abs(zp[:, 2] - z[:, 2]).max() > 1e-6


def test_same_seed_gives_identical_checkpoint():
    s = generate_synthetic(9, 5600)
    cfg = TeacherConfig(layer_count=3, feature_dim=8, mlp_hidden=8, epochs=1,
                        head_taps={"mid_price": 1, "spread": 2, "total_volume": 3})
    a, _ = train_teacher(s, cfg, seed=4)
    b, _ = train_teacher(s, cfg, seed=4)
    assert checkpoint_bytes(a.net, a.checkpoint_extra()) == checkpoint_bytes(b.net, b.checkpoint_extra())


def test_untrained_teacher_is_no_better_than_the_constant_baseline():
    s = generate_synthetic(7, 6000)
    _, curve = train_teacher(s, TeacherConfig(epochs=0), seed=7)
    for t in TASKS:
        assert curve[0]["val_mse"][t] >= 0.9 * curve[0]["val_baseline"][t]


def test_trained_teacher_beats_constant_baseline_on_every_task():
    s = generate_synthetic(7, 20000)
    model, curve = train_teacher(s, TeacherConfig(), seed=7)
    final = curve[-1]
    for t in TASKS:
        assert final["val_mse"][t] < final["val_baseline"][t], t
