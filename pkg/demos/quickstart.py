"""From a synthetic corpus to one agent-built ladder, in about two minutes.

    python demos/quickstart.py [--episodes 60]

Generates a corpus, fits the three outcome predictors, trains a small
Q-network and prints the ladder it builds for an unseen segment next to the
fixed HLS template.
"""
import argparse

from qladder.domain import ConfigSpace, RewardWeights
from qladder.environment import generate_synthetic_corpus
from qladder.ladder import hls_ladder, infer_ladder, ladder_summary
from qladder.predictors import split_segments, train_predictor_set
from qladder.qnet import DqnConfig, train


def show(title, ladder, grid, space):
    print(f"\n{title}")
    print(f"{'target':>8} {'res':>5} {'qp':>3} {'kbps':>8} {'xpsnr':>6} {'dec s':>6}")
    for rung in ladder.rungs:
        i = space.action_index(rung.resolution, rung.qp)
        print(f"{rung.tb:8.0f} {rung.resolution:5d} {rung.qp:3d} {grid.bitrate[i]:8.0f} "
              f"{grid.xpsnr[i]:6.2f} {grid.dec_time[i]:6.2f}")
    s = ladder_summary(ladder, grid, space)
    print(f"mean quality {s['quality']:.2f}, mean decoding time {s['dec_time_s']:.2f}s, "
          f"switch score {s['switch']:.0f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=60)
    args = ap.parse_args()

    space = ConfigSpace()
    feats, log = generate_synthetic_corpus(12, seed=3, space=space)
    train_ids, test_ids = split_segments(log.segment_ids, 0.25, seed=3)
    print(f"{len(log.segment_ids)} segments, {space.n_actions} configurations each; "
          f"training on {len(train_ids)}, holding out {len(test_ids)}")

    predictors = train_predictor_set(log, train_ids, seed=0)
    result = train(log, train_ids, space, RewardWeights(0.8, 0.6, 0.1),
                   DqnConfig(episodes=args.episodes), seed=0)
    first, last = result.trace[0].cum_reward, result.trace[-1].cum_reward
    print(f"episode reward {first:.1f} -> {last:.1f} over {args.episodes} episodes")

    sid = test_ids[0]
    grid = log.grid(sid)
    show(f"HLS template, segment {sid}", hls_ladder(grid, space), grid, space)
    show(f"Agent ladder, segment {sid}", infer_ladder(result.agent, predictors, log.features[sid]), grid, space)


if __name__ == "__main__":
    main()
