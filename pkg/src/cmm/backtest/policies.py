"""Quoting policies: each maps decision indices to (mid, spread, volume)."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError
from ..teacher import TASKS, clamp_prediction, raw_windows, teacher_predict


class Policy:
    name = "policy"

    def predict(self, series, indices):
        """Arrays ``(mid, spread, volume)`` for every decision index."""
        raise NotImplementedError


def _inputs(normalization, history_len, series, indices):
    return normalization.inputs(raw_windows(series, indices, history_len))


class TeacherPolicy(Policy):
    """Quotes straight from the teacher's heads."""

    name = "teacher"

    def __init__(self, teacher, batch=512):
        self.teacher = teacher
        self.batch = batch

    def predict(self, series, indices):
        t = self.teacher
        x = _inputs(t.normalization, t.config.history_len, series, indices)
        ref = series.mid[np.asarray(indices)]
        outs = [teacher_predict(t, x[s:s + self.batch], ref[s:s + self.batch], capture=())[0]
                for s in range(0, len(x), self.batch)]
        return tuple(np.concatenate([o[k] for o in outs]) for k in range(3))

    def decide(self, flat_input, ref_mid):
        z = self.teacher.predict_z_fast(flat_input.reshape(self.teacher.config.history_len, -1))
        return _denormalize(self.teacher.normalization, z, ref_mid)


class FusedPolicy(Policy):
    """Quotes from the fused expert ensemble."""

    name = "fused"

    def __init__(self, ensemble):
        self.ensemble = ensemble

    def predict(self, series, indices):
        e = self.ensemble
        x = _inputs(e.normalization, e.history_len, series, indices).reshape(len(indices), -1)
        return e.predict(x, series.mid[np.asarray(indices)])

    def decide(self, flat_input, ref_mid):
        z = self.ensemble.fuse_z(flat_input[None])
        return _denormalize(self.ensemble.normalization, z, ref_mid)


class SingleExpertPolicy(Policy):
    """One unfused expert per task, all from the same regime."""

    def __init__(self, experts, regime):
        chosen = {e.spec.task: e for e in experts if e.spec.regime == regime and e.spec.paired}
        if set(chosen) != set(TASKS):
            raise ConfigurationError(f"no paired expert for every task in regime {regime!r}")
        self.experts = [chosen[t] for t in TASKS]
        self.name = f"single-{regime}"

    def predict(self, series, indices):
        e0 = self.experts[0]
        x = _inputs(e0.normalization, e0.history_len, series, indices).reshape(len(indices), -1)
        z = np.stack([e.predict(x)[0] for e in self.experts], axis=1)
        return _denormalize(e0.normalization, z, series.mid[np.asarray(indices)])


class MidFollowerPolicy(Policy):
    """Naive baseline: quote around the current mid at the current spread."""

    name = "mid-follower"

    def __init__(self, volume=20.0):
        self.volume = float(volume)

    def predict(self, series, indices):
        idx = np.asarray(indices)
        mid, spread = series.mid[idx], series.spread[idx]
        return mid, spread, np.full(len(idx), self.volume)


def _denormalize(normalization, z, ref_mid):
    raw = normalization.targets_from_z(np.atleast_2d(z), np.asarray(ref_mid, dtype=float).reshape(-1))
    return clamp_prediction(raw[:, 0], raw[:, 1], raw[:, 2], normalization.tick_size)
