import numpy as np
import pytest

from cmm import ofdd, pipeline
from cmm.errors import ConfigurationError, DataError
from cmm.lobsim import Banding, band_values
from cmm.netcore import autodiff as ad, checkpoint_bytes
from cmm.ofdd import (MAX_STUDENT_FRACTION, DistillConfig, SliceCounter, build_expert_grid, distill_loss,
                      expert_budget, regime_slice)
from cmm.teacher import TASKS, TeacherConfig


def test_default_grid_has_nine_paired_specs_three_per_regime():
    specs = build_expert_grid(TeacherConfig())
    assert len(specs) == 9
    assert all(s.paired for s in specs)
    assert sorted(s.regime for s in specs) == ["high"] * 3 + ["low"] * 3 + ["medium"] * 3
    assert len({s.key for s in specs}) == 9


def test_full_grid_has_27_cells_with_nine_paired():
    specs = build_expert_grid(TeacherConfig(), full=True)
    assert len(specs) == 27 and sum(s.paired for s in specs) == 9


def test_spec_rejects_wrong_pairing():
    with pytest.raises(ConfigurationError):
        ofdd.ExpertSpec("shallow", "spread", "low", True)


def _banding(n=300, seed=0):
    v = np.random.default_rng(seed).random(n)
    codes, thr, deg = band_values(v)
    return Banding(np.arange(n), v, codes, thr, deg)


def test_regime_slices_partition_a_tertile_banded_set():
    b = _banding()
    idx = np.arange(300)
    slices = {r: regime_slice(idx, b, r) for r in ("low", "medium", "high")}
    assert all(abs(len(s) - 100) <= 1 for s in slices.values())
    union = np.concatenate(list(slices.values()))
    assert sorted(union.tolist()) == idx.tolist()
    assert len(set(union.tolist())) == len(union)


def test_empty_or_unlabelled_slice_is_an_error():
    b = _banding()
    with pytest.raises(DataError, match="more data"):
        regime_slice(np.flatnonzero(b.codes == 0), b, "high")
    with pytest.raises(DataError, match="no volatility label"):
        regime_slice(np.array([1000]), b, "low")


def test_distill_loss_hand_values():
    cfg = DistillConfig(alpha=1.0, beta=1.0)
    f = np.ones((1, 2))
    assert distill_loss(np.array([1.0]), f, np.array([3.0]), f, cfg) == pytest.approx(4.0)
    assert distill_loss(np.array([3.0]), f, np.array([3.0]), f, cfg) == 0.0


def test_zero_alpha_ignores_features():
    cfg = DistillConfig(alpha=0.0, beta=1.0)
    rng = np.random.default_rng(0)
    pred, tp = rng.standard_normal(20), rng.standard_normal(20)
    base = distill_loss(pred, rng.standard_normal((20, 4)), tp, rng.standard_normal((20, 4)), cfg)
    for _ in range(5):
        assert distill_loss(pred, rng.standard_normal((20, 4)), tp, rng.standard_normal((20, 4)), cfg) == base


def test_distill_loss_shape_mismatch_and_autodiff_path():
    cfg = DistillConfig()
    with pytest.raises(ConfigurationError):
        distill_loss(np.zeros(3), np.zeros((3, 4)), np.zeros(3), np.zeros((3, 5)), cfg)
    with ad.Tape() as tape:
        p = ad.parameter(np.array([1.0, 2.0]), "p")
        loss = distill_loss(p, ad.constant(np.zeros((2, 1))), np.zeros(2), np.zeros((2, 1)), cfg)
    np.testing.assert_allclose(tape.gradient(loss)["p"], [1.0, 2.0])


def test_distill_config_validation():
    with pytest.raises(ConfigurationError):
        DistillConfig(alpha=0.0, beta=0.0).validate()
    with pytest.raises(ConfigurationError):
        DistillConfig(grid="half").validate()


def test_experts_are_small_and_train_on_their_slice_only(small_teacher, small_distilled):
    teacher, _ = small_teacher
    prep, targets, d = small_distilled
    assert len(d.experts) == 9
    n_teacher = teacher.net.num_parameters()
    assert all(e.net.num_parameters() <= MAX_STUDENT_FRACTION * n_teacher for e in d.experts)
    spec = d.experts[0].spec
    counter = SliceCounter()
    ofdd.train_expert(spec, teacher, targets["train"], prep.banding, prep.splits["train"],
                      pipeline.distill_config(DistillConfig(epochs=1), 0), counter=counter)
    allowed = set(regime_slice(prep.splits["train"], prep.banding, spec.regime).tolist())
    assert counter.indices <= allowed and counter.steps > 0


def test_same_seed_gives_identical_expert(small_teacher, small_distilled):
    teacher, _ = small_teacher
    prep, targets, d = small_distilled
    cfg = pipeline.distill_config(DistillConfig(epochs=2), 0)
    spec = d.experts[4].spec
    again, _ = ofdd.train_expert(spec, teacher, targets["train"], prep.banding, prep.splits["train"], cfg)
    assert checkpoint_bytes(again.net, again.checkpoint_extra()) == checkpoint_bytes(d.experts[4].net,
                                                                                      d.experts[4].checkpoint_extra())


def test_monolith_matches_budget_and_reduces_its_loss(small_distilled):
    _, _, d = small_distilled
    budget = expert_budget(d.experts)
    assert abs(d.monolith.net.num_parameters() - budget) <= 0.05 * budget
    assert d.monolith_curve["final_loss"] < d.monolith_curve["init_loss"]
    assert d.monolith.predict_z(np.zeros((2, d.monolith.net.config["input_width"]))).shape == (2, len(TASKS))


def test_students_reduce_their_distillation_loss(small_distilled):
    _, _, d = small_distilled
    for key, c in d.curves.items():
        assert c["final_loss"] < c["init_loss"], key
