"""Train the DDPG bitrate agent on the eight-tile benchmark.

Four tiles near the world origin are out of view and four far tiles are in
view, so the agent has to learn to spend the budget on the far ones.

Run: python3 demos/04_train_agent.py [--episodes 200]
"""
import argparse

import numpy as np

from tilestream.dba import DdpgConfig, train
from tilestream.harness import Policy, benchmark_env_factory, run_simulation, tiny_benchmark

ap = argparse.ArgumentParser()
ap.add_argument("--episodes", type=int, default=200)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

config = DdpgConfig(width=16, sa_centroids=8, max_group=8, optimizer="adam",
                    actor_lr=1e-3, critic_lr=1e-3, seed=args.seed)
agent, log = train(benchmark_env_factory(args.seed), config, episodes=args.episodes)
for row in log[:: max(1, args.episodes // 10)]:
    print(f"episode {row['episode']:4d}  mean reward {row['mean_reward']:.3f}  "
          f"critic loss {row['critic_loss']:.4f}  sigma {row['noise_sigma']:.3f}")

manifest, traj, trace, cfg = tiny_benchmark(args.seed)
policies = {"ddpg": Policy("ddpg", manifest.n_levels, agent=agent),
            "distance": Policy("distance", manifest.n_levels),
            "viewport-greedy": Policy("viewport-greedy", manifest.n_levels, frustum=cfg.frustum),
            "random": Policy("random", manifest.n_levels, seed=args.seed)}
print("\npolicy            reward/slot  coverage (mean over slots)")
for name, policy in policies.items():
    rows, _ = run_simulation(manifest, traj, trace, policy, cfg)
    print(f"{name:<17s} {np.mean([r.reward for r in rows]):11.3f}  "
          f"{np.mean([r.coverage for r in rows]):.3f}")
