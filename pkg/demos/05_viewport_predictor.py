"""Train the viewport predictor and its two ablations on synthetic users.

Users keep their viewing style across scenes, so the per-user prior learned
on three scenes should help on a fourth, held-out one.

Run: python3 demos/05_viewport_predictor.py
"""
from tilestream.cvp import CvpConfig, evaluate_mae, train_cvp
from tilestream.viewport import gen_synthetic_trajectories

seed = 0
train_set = [t for s in ("a", "b", "c")
             for t in gen_synthetic_trajectories(seed, 6, duration=20, scene_id=s)]
held_out = gen_synthetic_trajectories(seed, 6, duration=20, scene_id="held")

print("variant   position MAE (m)  rotation MAE (deg)")
for name, kw in (("full", {}), ("no-cpe", {"disable_cpe": True}), ("no-hpe", {"disable_hpe": True})):
    cfg = CvpConfig(horizon=10, optimizer="adam", lr=1e-3, epochs=60, windows_per_epoch=1280,
                    batch_size=32, seed=seed, **kw)
    model, curve = train_cvp(train_set, cfg)
    pos, rot = evaluate_mae(model, held_out, stride=5)
    print(f"{name:<8s} {pos:17.3f} {rot:19.2f}   (train loss {curve[0]:.3f} -> {curve[-1]:.3f})")
