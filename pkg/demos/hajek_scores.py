"""Hand-sized look at the Hajek score and the weights it produces.

    python demos/hajek_scores.py
"""

import numpy as np

from cmm.hajek import FusionConfig, hajek_score, task_weights


def main():
    v_avg = np.array([0.0, 2.0])
    for v in ([3.0, 4.0], [5.0, 0.0], [0.0, -1.0]):
        print(f"score({v}, {v_avg.tolist()}) = {hajek_score(v, v_avg):g}")

    scores = np.array([2.0, 0.5, -1.0])
    paired = [True, False, False]
    for tau in (0.25, 1.0, 4.0):
        w = task_weights(scores, paired, FusionConfig(temperature=tau))
        print(f"temperature {tau:<5} weights {np.round(w, 4)}")
    w = task_weights(scores, paired, FusionConfig(score_mode="clamped-linear", pair_bias=0.0))
    print(f"clamped-linear       weights {np.round(w, 4)}")


if __name__ == "__main__":
    main()
