"""How the reward weights steer the ladder.

    python demos/weight_sweep.py [--episodes 150]

Trains one agent per weight vector and reports measured ladder means on a
separate corpus. Quality-only weights should buy quality, time-only weights
should cut decoding time and switch-only weights should hold one resolution.
"""
import argparse

import numpy as np

from qladder.domain import ConfigSpace, RewardWeights
from qladder.environment import generate_synthetic_corpus
from qladder.ladder import infer_ladder, ladder_summary
from qladder.predictors import train_predictor_set
from qladder.qnet import DqnConfig, train

WEIGHTS = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0.8, 0.6, 0.1)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=150)
    args = ap.parse_args()

    space = ConfigSpace()
    _, train_log = generate_synthetic_corpus(10, seed=0, space=space)
    _, eval_log = generate_synthetic_corpus(10, seed=12, space=space)
    predictors = train_predictor_set(train_log, train_log.segment_ids, seed=0)

    print(f"{'weights':>16} {'quality':>8} {'dec s':>6} {'switch':>7} {'flat':>5}")
    for w in WEIGHTS:
        weights = RewardWeights(*w)
        agent = train(train_log, train_log.segment_ids, space, weights,
                      DqnConfig(episodes=args.episodes), seed=0).agent
        rows = [ladder_summary(infer_ladder(agent, predictors, eval_log.features[s], weights),
                               eval_log.grid(s), space) for s in eval_log.segment_ids]
        mean = {k: np.mean([r[k] for r in rows]) for k in ("quality", "dec_time_s", "switch")}
        flat = np.mean([r["switch"] == 0 for r in rows])
        print(f"{str(w):>16} {mean['quality']:8.2f} {mean['dec_time_s']:6.2f} {mean['switch']:7.0f} {flat:5.0%}")


if __name__ == "__main__":
    main()
