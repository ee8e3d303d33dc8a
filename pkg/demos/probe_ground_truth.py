"""Probe a network whose module-to-output wiring is known in advance.

Branch k of ParallelBranches alone drives output k, so the attribution map
should come out as the identity. Prints S and the map for a few seeds.

    python demos/probe_ground_truth.py --seeds 3
"""

import argparse
import logging

import numpy as np

from cmm.probe import ParallelBranches, ProbeConfig, run_probe


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--branches", type=int, default=3)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    for seed in range(args.seeds):
        net = ParallelBranches.build(n_branches=args.branches, seed=seed)
        x = np.random.default_rng(100 + seed).standard_normal((256, net.input_width))
        res = run_probe(net, x, ProbeConfig(seed=seed))
        logging.info("seed %d, identity recovered: %s", seed, res.C == tuple(range(args.branches)))
        print(res.to_text())


if __name__ == "__main__":
    main()
