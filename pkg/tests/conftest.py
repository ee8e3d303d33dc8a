import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_series():
    from cmm.lobsim import generate_synthetic
    return generate_synthetic(11, 9000, (("low", 1500), ("high", 1500), ("medium", 1500)))


@pytest.fixture(scope="session")
def small_teacher(small_series):
    """A briefly trained teacher on the small series (seconds, not minutes)."""
    from cmm.teacher import TeacherConfig, sample_indices, train_teacher
    cfg = TeacherConfig(epochs=1)
    model, curve = train_teacher(small_series, cfg, seed=5, indices=sample_indices(small_series, 8)[200:])
    return model, curve


@pytest.fixture(scope="session")
def small_distilled(small_series, small_teacher):
    """Prepared splits, teacher targets and a short expert/monolith run on the small series."""
    from cmm import ofdd, pipeline
    teacher, _ = small_teacher
    data = pipeline.DataConfig(n_steps=len(small_series), vol_window=200)
    prep = pipeline.prepare(small_series, data, teacher.config.history_len)
    targets = pipeline.target_sets(teacher, prep)
    d = pipeline.run_distill(teacher, prep, targets, ofdd.DistillConfig(epochs=2), root=0)
    return prep, targets, d


@pytest.fixture(scope="session")
def small_bundle(small_teacher, small_distilled):
    """Teacher, fused ensemble and a low-data retrainer built from the small fixtures."""
    from cmm import hajek, ofdd, pipeline
    from cmm.backtest import ModelBundle
    teacher, _ = small_teacher
    prep, targets, d = small_distilled
    fcfg = hajek.FusionConfig(epochs=3)
    kernel, _ = pipeline.fit_kernel(d.experts, targets, fcfg, root=0)
    ens = hajek.Ensemble(d.experts, kernel, pipeline.fusion_config(fcfg, 0))
    retrain = pipeline.low_data_retrainer(teacher, prep, targets, ofdd.DistillConfig(epochs=1), fcfg, 0)
    return ModelBundle(teacher, ens, d.experts, retrain)


ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Criterion number -> (passed, detail); printed after the run."""
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"ACCEPTANCE criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
