"""Small end-to-end run: synthetic market, teacher, probe, experts, kernel, backtest.

Uses a shortened series and few epochs so it finishes in a couple of minutes.
The full-size run is ``cmm ... --config configs/default.toml``.

    python demos/small_pipeline.py --seed 0
"""

import argparse
import logging

from cmm import hajek, ofdd, pipeline
from cmm.backtest import ModelBundle, ProtocolConfig, run_protocols
from cmm.probe import ProbeConfig
from cmm.teacher import TASKS, TeacherConfig

SCHEDULE = (("low", 3000), ("high", 3000), ("medium", 3000))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=2, help="teacher epochs")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

    data = pipeline.DataConfig(seed=args.seed, n_steps=9000, schedule=SCHEDULE, vol_window=500)
    res = pipeline.run_pipeline(data, TeacherConfig(epochs=args.epochs), ofdd.DistillConfig(epochs=5),
                                hajek.FusionConfig(epochs=10))

    probe, bands = pipeline.run_probe_stage(res.teacher, res.prep, ProbeConfig(trials_per_cell=4), args.seed)
    print(probe.to_text())
    print("bands picked per task:", bands)

    ev = res.evaluation
    print(f"imitation MSE fused {ev['imitation_fused_mean']:.4g} vs monolith {ev['imitation_monolith_mean']:.4g}")
    for t in TASKS:
        print(f"  {t}: fused / best single = {ev['fused_over_best_single'][t]:.3f}")

    cfg = ProtocolConfig(seed=pipeline.sub_seed(args.seed, "backtest"), long_run=False, low_data=False)
    bundle = ModelBundle(res.teacher, res.ensemble, res.distilled.experts)
    for rep in run_protocols(bundle, cfg).values():
        print(rep.to_text())


if __name__ == "__main__":
    main()
