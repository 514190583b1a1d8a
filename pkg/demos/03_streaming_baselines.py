"""Stream one session with the rule-based policies and compare coverage.

Coverage is the importance-weighted share of the in-view content already
delivered; it is a proxy for rendered image quality.

Run: python3 demos/03_streaming_baselines.py [--plot out/prefix]
"""
import argparse

import numpy as np

from tilestream.env import synthetic_trace
from tilestream.harness import (Policy, SimConfig, compare_policies, format_summary,
                                plot_curves, run_simulation)
from tilestream.scene import gen_synthetic_scene, preprocess
from tilestream.viewport import gen_synthetic_trajectories

ap = argparse.ArgumentParser()
ap.add_argument("--plot", help="file prefix for coverage-vs-slot charts")
args = ap.parse_args()

_, manifest = preprocess(gen_synthetic_scene(2, 150_000, payload_bytes=1024), "demo")
traj = gen_synthetic_trajectories(2, 1, duration=50.0, scene_id="demo")[0]
trace = synthetic_trace(2, 30, mean_mbps=80)
cfg = SimConfig(horizon=5)

rows, _ = run_simulation(manifest, traj, trace.scaled(40),
                         Policy("viewport-greedy", manifest.n_levels, manifest.tile_edge), cfg)
print("viewport-greedy at 40 Mbps, first slots:")
print(" slot  budget MB  sent MB  cumulative MB  coverage")
for r in rows[:8]:
    print(f"{r.slot:5d} {r.budget_bits / 8e6:10.2f} {r.sent_bits / 8e6:8.2f} "
          f"{r.cumulative_megabytes:14.2f} {r.coverage:9.3f}")

factories = {kind: (lambda k: lambda m, seed: Policy(k, m.n_levels, m.tile_edge, seed=seed))(kind)
             for kind in ("distance", "viewport-greedy", "random")}
summary, curves = compare_policies([(manifest, traj, trace)], factories, seeds=(0, 1), config=cfg)
print("\nmean coverage over the session")
print(format_summary(summary))
best = max(summary, key=lambda r: r["mean_coverage"])
print(f"best: {best['policy']} at {best['avg_mbps']} Mbps ({best['mean_coverage']:.3f})")
if args.plot:
    print("wrote", plot_curves(curves, args.plot))
print("slots until 0.9 coverage at 40 Mbps:",
      {k: int(np.argmax(v.mean(0) >= 0.9)) + 1 if (v.mean(0) >= 0.9).any() else None
       for (k, p), v in curves.items() if p == 40})
