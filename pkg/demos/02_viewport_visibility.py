"""Synthetic users, their viewing styles, and which tiles fall into view.

Run: python3 demos/02_viewport_visibility.py
"""
import numpy as np

from tilestream.scene import gen_synthetic_scene, preprocess
from tilestream.viewport import (FrustumConfig, future_visibility, gen_synthetic_trajectories,
                                 user_styles, visible_tiles)

_, manifest = preprocess(gen_synthetic_scene(1, 20_000), "demo")
styles = user_styles(seed=2, n_users=6)
trajs = gen_synthetic_trajectories(seed=2, n_users=6, duration=20.0, scene_id="demo")
cfg = FrustumConfig()

print("user  style        path length (m)  tiles in view at t=0")
for traj, style in zip(trajs, styles):
    step = np.linalg.norm(np.diff(traj.positions, axis=0), axis=1).sum()
    seen = visible_tiles(traj.viewport(0), manifest, cfg)
    print(f"{traj.user_id}   {style['style']:<12s} {step:15.2f}  {len(seen):5d} / {manifest.n_tiles}")

# the union over a longer look-ahead can only grow
traj = trajs[0]
frames = [traj.samples[i * 30] for i in range(10)]
counts = [int(future_visibility(frames[:h], manifest, cfg).sum()) for h in range(1, 11)]
print(f"\n{traj.user_id}: visible tiles for horizons 1..10 s:", counts)
