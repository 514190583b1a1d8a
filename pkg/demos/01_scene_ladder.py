"""Build a synthetic scene, cut it into tiles and look at the quality ladders.

Run: python3 demos/01_scene_ladder.py
"""
import numpy as np

from tilestream.scene import gen_synthetic_scene, preprocess, validate_ladder

anchors = gen_synthetic_scene(seed=0, n_anchors=40_000, payload_bytes=256)
tiles, manifest = preprocess(anchors, "demo")
print(f"{len(anchors.positions)} anchors -> {manifest.n_tiles} tiles, {manifest.n_levels} levels")

# every ladder must be non-decreasing in bits and points
assert all(validate_ladder(t) is None for t in tiles)

# the busiest tile, level by level
k = int(np.argmax(manifest.points[:, -1]))
print(f"\ntile {manifest.tiles[k].index} (center {np.round(manifest.centers[k], 2)})")
print(" level   points      MB   importance")
for lvl in range(manifest.n_levels):
    print(f"{lvl + 1:6d} {int(manifest.points[k, lvl]):8d} {manifest.bits[k, lvl] / 8e6:7.3f} "
          f"{manifest.importance[k, lvl]:12.4f}")

total = manifest.bits.sum(axis=0) / 8e6
print("\nwhole scene per level (MB):", np.round(total, 2))
print("seconds to send the finest level at 40/80/120 Mbps:",
      [round(float(total[-1]) * 8 / r, 1) for r in (40, 80, 120)])
