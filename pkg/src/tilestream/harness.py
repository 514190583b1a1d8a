"""Simulation runner, rule-based baselines and evaluation helpers.

Coverage (importance-weighted share of the in-view content already sent) is
the quality metric here; it stands in for image-space quality, which would
need a renderer.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .env import RewardWeights, StreamEnv, constant_trace, coverage_metric  # noqa: F401
from .scene import AnchorSet, preprocess
from .viewport import FrustumConfig, Trajectory, future_visibility

FLOOR_SCORE = -1e9
POLICY_KINDS = ("ddpg", "distance", "viewport-greedy", "random")
EPISODE_COLUMNS = ("slot", "budget_bits", "sent_bits", "reward", "visible_tiles", "coverage")


# --------------------------------------------------------------------------
# policies


def distance_policy(state, n_levels):
    """Closer to the world origin first; equal scores across levels."""
    return np.repeat(-np.linalg.norm(state.centers, axis=1)[:, None], n_levels, axis=1)


def viewport_greedy_policy(state, n_levels, tile_edge, frustum=None):
    """Scores and eligibility for the viewport-first baseline.

    Tiles in the union of the predicted views are ranked by distance to the
    first predicted camera position; all other tiles get the floor score and
    are not eligible.
    """
    vis = future_visibility(state.viewports, _Geometry(state.centers, tile_edge),
                            frustum or FrustumConfig()).astype(bool)
    cam = state.viewports[0, :3]
    d = np.linalg.norm(state.centers - cam, axis=1)
    scores = np.where(vis, -d, FLOOR_SCORE)
    scores = np.repeat(scores[:, None], n_levels, axis=1)
    eligible = np.repeat(vis[:, None], n_levels, axis=1)
    return scores, eligible


@dataclass
class _Geometry:
    centers: np.ndarray
    tile_edge: float


class Policy:
    """Maps a StreamState to (K x L scores, eligibility mask or None)."""

    def __init__(self, kind, n_levels, tile_edge=3.2, agent=None, seed=0, frustum=None):
        if kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {kind!r}; expected one of {POLICY_KINDS}")
        if kind == "ddpg" and agent is None:
            raise ValueError("ddpg policy needs a trained agent")
        self.kind = kind
        self.n_levels = n_levels
        self.tile_edge = tile_edge
        self.agent = agent
        self.frustum = frustum
        self.rng = np.random.default_rng(seed)

    def __call__(self, state):
        K, L = state.n_tiles, self.n_levels
        if self.kind == "distance":
            return distance_policy(state, L), None
        if self.kind == "random":
            return self.rng.normal(size=(K, L)), None
        if self.kind == "viewport-greedy":
            return viewport_greedy_policy(state, L, self.tile_edge, self.frustum)
        return self.agent(state), None


# --------------------------------------------------------------------------
# simulation


@dataclass
class SimConfig:
    horizon: int = 30
    dt: float = 1.0
    weights: RewardWeights = None
    frustum: FrustumConfig = field(default_factory=FrustumConfig)
    predictor: object = None   # None -> oracle viewports
    max_slots: int | None = None


@dataclass
class MetricsRow:
    slot: int
    cumulative_megabytes: float
    coverage: float
    reward: float
    budget_bits: float
    sent_bits: float
    visible_tiles: int
    max_increment: float


def make_env(manifest, trajectory, trace, config=None):
    c = config or SimConfig()
    return StreamEnv(manifest, trajectory, trace, c.horizon, c.dt,
                     c.weights or RewardWeights(dt=c.dt), c.frustum, c.predictor, c.max_slots)


def run_simulation(manifest, trajectory, trace, policy, config=None):
    """Roll one episode; returns (metrics rows, episode-log CSV text)."""
    env = make_env(manifest, trajectory, trace, config)
    rows = []
    sent_total = 0.0
    state = env.state
    while not env.done:
        scores, eligible = policy(state)
        state, reward, _, info = env.step(scores, eligible)
        sent_total += info["sent_bits"]
        rows.append(MetricsRow(info["slot"], sent_total / 8e6, info["coverage"], reward,
                               info["budget_bits"], info["sent_bits"],
                               int(info["visible"].sum()), info["selection"].max_increment))
    return rows, format_episode_log(rows)


def format_episode_log(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_COLUMNS)
    for r in rows:
        w.writerow([r.slot, repr(float(r.budget_bits)), repr(float(r.sent_bits)),
                    repr(float(r.reward)), r.visible_tiles, repr(float(r.coverage))])
    return buf.getvalue()


def compare_policies(runs, policy_factories, presets=(40, 80, 120), seeds=(0,), config=None):
    """Mean and std of coverage per policy and bandwidth preset.

    ``runs`` is a list of (manifest, trajectory, trace) triples; each trace is
    rescaled to every preset. ``policy_factories`` maps a name to
    ``factory(manifest, seed) -> Policy``. Returns (summary rows, per-slot
    curves) where curves[(name, preset)] is an array (n_runs * n_seeds, slots).
    """
    if len(policy_factories) < 2:
        raise ValueError("need at least two policies to compare")
    summary, curves = [], {}
    for name, factory in policy_factories.items():
        for preset in presets:
            per_run = []
            for manifest, traj, trace in runs:
                for seed in seeds:
                    rows, _ = run_simulation(manifest, traj, trace.scaled(preset),
                                             factory(manifest, seed), config)
                    per_run.append([r.coverage for r in rows])
            n = min(len(c) for c in per_run)
            arr = np.array([c[:n] for c in per_run])
            curves[(name, preset)] = arr
            slot_means = arr.mean(axis=1)
            summary.append({"policy": name, "avg_mbps": preset,
                            "mean_coverage": float(slot_means.mean()),
                            "std_coverage": float(slot_means.std())})
    return summary, curves


def format_summary(summary):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "avg_mbps", "mean_coverage", "std_coverage"])
    for r in summary:
        w.writerow([r["policy"], r["avg_mbps"], repr(r["mean_coverage"]), repr(r["std_coverage"])])
    return buf.getvalue()


def format_curves(curves):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "avg_mbps", "slot", "mean_coverage", "std_coverage"])
    for (name, preset), arr in curves.items():
        for s in range(arr.shape[1]):
            w.writerow([name, preset, s, repr(float(arr[:, s].mean())),
                        repr(float(arr[:, s].std()))])
    return buf.getvalue()


def plot_curves(curves, out_prefix):
    """One coverage-vs-slot PNG per preset; returns the written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for preset in sorted({p for _, p in curves}):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for (name, p), arr in curves.items():
            if p != preset:
                continue
            m, s = arr.mean(0), arr.std(0)
            x = np.arange(1, len(m) + 1)
            ax.plot(x, m, label=name)
            ax.fill_between(x, m - s, m + s, alpha=0.2)
        ax.set_xlabel("slot")
        ax.set_ylabel("coverage")
        ax.set_ylim(0, 1.02)
        ax.set_title(f"{preset} Mbps")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = f"{out_prefix}_{preset:g}mbps.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths


# --------------------------------------------------------------------------
# tiny benchmark


NEAR_TILES = ((0, 0, 0), (-1, 0, 0), (0, -1, 0), (-1, -1, 0))
FAR_TILES = ((3, 0, 0), (4, 0, 0), (3, -1, 0), (4, -1, 0))
BENCH_FRUSTUM = FrustumConfig(horizontal_fov=60.0, vertical_fov=50.0, near=0.1, far=50.0)


def tiny_benchmark(seed=0, n_slots=30, horizon=5, mbps=None, anchors_per_tile=120):
    """Eight-tile, two-level scene with a fixed camera looking at the far tiles.

    The four tiles nearest the world origin are out of view, so origin-first
    ordering is a poor fit here. Returns (manifest, trajectory, trace, SimConfig).
    """
    rng = np.random.default_rng([seed, 11])
    edge = 3.2
    pos, scl = [], []
    for idx in NEAR_TILES + FAR_TILES:
        n = anchors_per_tile
        lo = np.array(idx) * edge
        p = lo + rng.uniform(0.05, edge - 0.05, (n, 3))
        pos.append(p.astype(np.float32).astype(float))
        scl.append(np.exp(rng.normal(np.log(0.05), 0.3, (n, 3))).astype(np.float32).astype(float))
    pos, scl = np.concatenate(pos), np.concatenate(scl)
    anchors = AnchorSet(pos, scl, np.full(len(pos), 64))
    _, manifest = preprocess(anchors, "tiny", edge, (0.8,))
    # camera on the far side, looking back toward the far cluster only
    cam = np.array([12.8, 9.0, 1.6])
    target = np.array([12.8, 0.0, 1.6])
    yaw = np.degrees(np.arctan2(*(target - cam)[1::-1]))
    n_frames = int((n_slots + horizon) * 30) + 1
    samples = np.tile([*cam, 0.0, yaw, 0.0], (n_frames, 1))
    traj = Trajectory("bench", "tiny", samples, 30.0)
    if mbps is None:
        # budget of about two coarse representations per slot
        mbps = 2.0 * manifest.bits[:, 0].mean() / 1e6
    trace = constant_trace(n_slots, mbps)
    cfg = SimConfig(horizon=horizon, dt=1.0, frustum=BENCH_FRUSTUM)
    return manifest, traj, trace, cfg


def benchmark_env_factory(seed=0, **kw):
    manifest, traj, trace, cfg = tiny_benchmark(seed, **kw)

    def factory(episode, rng):
        return make_env(manifest, traj, trace, cfg)
    return factory
