"""Streaming MDP: state assembly, greedy representation selection, rewards.

Units: bandwidth in bits per second, slot length ``dt`` in seconds, so a
slot's budget is ``bandwidth * dt`` bits and the delay cost is in seconds.
Levels are 1-based (0 in the ledger means nothing sent); tiles are 0-based.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .viewport import FrustumConfig, Viewport, future_visibility, visible_mask

PRESETS_MBPS = (40, 80, 120)


class TraceError(ValueError):
    pass


class EpisodeDoneError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# bandwidth traces


@dataclass
class BandwidthTrace:
    samples: np.ndarray  # bits per second, one per slot
    label: str = ""
    scale: float = 1.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if len(self.samples) == 0:
            raise TraceError("empty bandwidth trace")
        if not (self.samples > 0).all():
            raise TraceError("bandwidth samples must be positive")

    def __len__(self):
        return len(self.samples)

    @property
    def mean_mbps(self):
        return float(self.samples.mean() / 1e6)

    def scaled(self, target_avg_mbps):
        factor = target_avg_mbps * 1e6 / self.samples.mean()
        return BandwidthTrace(self.samples * factor, self.label, self.scale * factor)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["slot", "mbps"])
        for i, s in enumerate(self.samples):
            w.writerow([i, repr(float(s / 1e6))])
        return buf.getvalue()


def parse_trace(text, label=""):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]][:2] != ["slot", "mbps"]:
        raise TraceError("line 1: expected header 'slot,mbps'")
    vals = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            v = float(row[1])
        except (IndexError, ValueError):
            raise TraceError(f"line {lineno}: bad mbps cell") from None
        if not v > 0:
            raise TraceError(f"line {lineno}: non-positive bandwidth {v}")
        vals.append(v * 1e6)
    return BandwidthTrace(vals, label)


def load_trace(path, target_avg_mbps=None):
    """Read a ``slot,mbps`` CSV; optionally rescale so the mean is the target."""
    with open(path) as f:
        trace = parse_trace(f.read(), label=str(path))
    return trace if target_avg_mbps is None else trace.scaled(target_avg_mbps)


def synthetic_trace(seed, n_slots, mean_mbps=80.0, volatility=0.35, corr=0.8, label=None):
    """Cellular-like throughput: exponentiated AR(1) noise, rescaled to ``mean_mbps``."""
    rng = np.random.default_rng(seed)
    x = np.zeros(n_slots)
    for i in range(1, n_slots):
        x[i] = corr * x[i - 1] + volatility * np.sqrt(1 - corr ** 2) * rng.normal()
    raw = np.exp(x + volatility * rng.normal(size=n_slots) * 0.3)
    return BandwidthTrace(raw, label or f"synthetic-{seed}").scaled(mean_mbps)


def constant_trace(n_slots, mbps):
    return BandwidthTrace(np.full(n_slots, mbps * 1e6), f"constant-{mbps}")


# --------------------------------------------------------------------------
# ledger, state, selection


class TransmissionLedger:
    """Highest level already sent per tile, with cached values at that level."""

    def __init__(self, manifest):
        self.manifest = manifest
        self.level = np.zeros(manifest.n_tiles, dtype=np.int64)

    def copy(self):
        other = TransmissionLedger(self.manifest)
        other.level = self.level.copy()
        return other

    def _at_prev(self, table):
        k = np.arange(len(self.level))
        vals = table[k, np.maximum(self.level - 1, 0)]
        return np.where(self.level > 0, vals, 0.0)

    @property
    def prev_bits(self):
        return self._at_prev(self.manifest.bits)

    @property
    def prev_points(self):
        return self._at_prev(self.manifest.points)

    @property
    def prev_importance(self):
        return self._at_prev(self.manifest.importance)

    def apply(self, selection):
        for k, lvl in selection.choices:
            if lvl <= self.level[k]:
                raise ValueError(f"tile {k}: level {lvl} is not an upgrade of {self.level[k]}")
            self.level[k] = lvl

    def complete(self):
        return bool((self.level == self.manifest.n_levels).all())


def tile_features(ledger, manifest):
    """Raw per-tile features ``(x, y, z, p_prev/p_L, s_prev/s_L, l_prev/L)``."""
    L = manifest.n_levels
    p_full = manifest.points[:, -1]
    s_full = manifest.importance[:, -1]
    with np.errstate(invalid="ignore", divide="ignore"):
        pr = np.where(p_full > 0, ledger.prev_points / p_full, 0.0)
        sr = np.where(s_full > 0, ledger.prev_importance / s_full, 0.0)
    return np.column_stack([manifest.centers, pr, sr, ledger.level / L])


def normalize_positions(xyz, manifest):
    lo, hi = manifest.bounds()
    mid, half = (lo + hi) / 2, np.maximum((hi - lo) / 2, 1e-9)
    return (np.asarray(xyz) - mid) / half


@dataclass
class StreamState:
    bandwidth: float               # bits per second
    viewports: np.ndarray          # (H, 6) predicted viewports
    features: np.ndarray           # (K, 6) raw tile features
    agent_features: np.ndarray     # (K, 6) positions scaled to [-1, 1]
    agent_viewports: np.ndarray    # (H, 6) positions scaled, angles / 180
    t: int = 0

    @property
    def centers(self):
        return self.features[:, :3]

    @property
    def n_tiles(self):
        return len(self.features)

    @property
    def agent_bandwidth(self):
        return self.bandwidth / 1e8  # 100 Mbps -> 1


def build_state(ledger, trace, t, predicted, manifest):
    if not 0 <= t < len(trace):
        raise IndexError(f"slot {t} outside trace of {len(trace)} slots")
    vp = np.array([v.as_vector() if isinstance(v, Viewport) else np.asarray(v, float)
                   for v in predicted]).reshape(-1, 6)
    feats = tile_features(ledger, manifest)
    agent = feats.copy()
    agent[:, :3] = normalize_positions(feats[:, :3], manifest)
    avp = vp.copy()
    avp[:, :3] = normalize_positions(vp[:, :3], manifest)
    avp[:, 3:] = vp[:, 3:] / 180.0
    return StreamState(float(trace.samples[t]), vp, feats, agent, avp, t)


@dataclass
class SelectionSet:
    choices: list = field(default_factory=list)  # (tile, level) in acceptance order
    total_bits: float = 0.0
    max_increment: float = 0.0

    def as_matrix(self, K, L):
        x = np.zeros((K, L), dtype=np.int64)
        for k, lvl in self.choices:
            x[k, lvl - 1] = 1
        return x

    def __len__(self):
        return len(self.choices)


def greedy_select(action, ledger, manifest, bandwidth, dt=1.0, eligible=None):
    """Accept upgrades in descending score order until the slot budget is exceeded.

    Candidates are ``(k, l)`` with ``l`` above the tile's sent level; score ties
    go to the lower tile, then the lower level. At most one level per tile per
    slot. The item that first pushes the running total past ``bandwidth * dt``
    is kept and selection stops.
    """
    scores = np.asarray(action, dtype=np.float64)
    K, L = manifest.n_tiles, manifest.n_levels
    if scores.shape != (K, L):
        raise ValueError(f"action shape {scores.shape} != ({K}, {L})")
    budget = bandwidth * dt
    levels = np.arange(1, L + 1)
    ok = levels[None, :] > ledger.level[:, None]
    if eligible is not None:
        ok &= np.asarray(eligible, dtype=bool)
    kk, ll = np.nonzero(ok)
    order = np.lexsort((ll, kk, -scores[kk, ll]))
    prev = ledger.prev_bits
    sel = SelectionSet()
    taken = np.zeros(K, dtype=bool)
    for i in order:
        k, lvl = int(kk[i]), int(ll[i]) + 1
        if taken[k]:
            continue
        inc = manifest.bits[k, lvl - 1] - prev[k]
        taken[k] = True
        sel.choices.append((k, lvl))
        sel.total_bits += inc
        sel.max_increment = max(sel.max_increment, inc)
        if sel.total_bits > budget:
            break
    return sel


@dataclass
class RewardWeights:
    quality: float = 10.0      # points term
    importance: float = 10.0   # importance term
    delay: float = 1.0
    dt: float = 1.0

    def __post_init__(self):
        if min(self.quality, self.importance, self.delay) < 0 or self.dt <= 0:
            raise ValueError("weights must be non-negative and dt positive")


def reward_terms(selection, y, ledger, manifest, weights, bandwidth):
    """Return (points term, importance term, delay penalty), unweighted."""
    p_prev, s_prev = ledger.prev_points, ledger.prev_importance
    pq = sq = 0.0
    for k, lvl in selection.choices:
        if not y[k]:
            continue
        dp = manifest.points[k, -1] - p_prev[k]
        ds = manifest.importance[k, -1] - s_prev[k]
        if dp != 0:
            pq += (manifest.points[k, lvl - 1] - p_prev[k]) / dp
        if ds != 0:
            sq += (manifest.importance[k, lvl - 1] - s_prev[k]) / ds
    t_cost = selection.total_bits / bandwidth
    return pq, sq, max(t_cost - weights.dt, 0.0)


def compute_reward(selection, y, ledger, manifest, weights, bandwidth):
    pq, sq, pen = reward_terms(selection, y, ledger, manifest, weights, bandwidth)
    return weights.quality * pq + weights.importance * sq - weights.delay * pen


def coverage_metric(ledger, visible, manifest):
    """Importance-weighted share of the visible tiles' content already sent."""
    vis = np.zeros(manifest.n_tiles, dtype=bool)
    if isinstance(visible, np.ndarray) and visible.dtype != object and len(visible) == manifest.n_tiles:
        vis = visible.astype(bool)
    else:
        vis[list(visible)] = True
    if not vis.any():
        return 1.0
    full = manifest.importance[vis, -1].sum()
    return float(ledger.prev_importance[vis].sum() / full) if full > 0 else 1.0


# --------------------------------------------------------------------------
# environment


def oracle_viewports(trajectory, t, H, dt=1.0):
    """True viewports at the next H slot boundaries after slot ``t``."""
    step = trajectory.rate * dt
    frames = [int(round((t + i) * step)) for i in range(1, H + 1)]
    if frames[-1] >= len(trajectory) or t < 0:
        raise IndexError(f"slot {t} with horizon {H} runs past the trajectory "
                         f"({len(trajectory)} frames)")
    return trajectory.samples[frames].copy()


class StreamEnv:
    """One streaming session: a scene, a user trajectory and a bandwidth trace.

    ``predictor(trajectory, t, H, dt)`` supplies the H predicted viewports at
    slot ``t``; the default uses the true future (oracle viewports).
    """

    def __init__(self, manifest, trajectory, trace, horizon=30, dt=1.0,
                 weights=None, frustum=None, predictor=None, max_slots=None):
        self.manifest = manifest
        self.trajectory = trajectory
        self.trace = trace
        self.horizon = horizon
        self.dt = dt
        self.weights = weights or RewardWeights(dt=dt)
        self.frustum = frustum or FrustumConfig()
        self.predictor = predictor
        step = trajectory.rate * dt
        last = len(trajectory) - 1
        if predictor is None:
            traj_slots = int(np.floor(last / step + 1e-9)) - horizon + 1
        else:
            traj_slots = int(np.floor(last / step + 1e-9))
        self.n_slots = max(0, min(len(trace), traj_slots))
        if max_slots is not None:
            self.n_slots = min(self.n_slots, max_slots)
        self.reset()

    def predict(self, t):
        if self.predictor is None:
            return oracle_viewports(self.trajectory, t, self.horizon, self.dt)
        return np.asarray(self.predictor(self.trajectory, t, self.horizon, self.dt))

    def reset(self):
        self.ledger = TransmissionLedger(self.manifest)
        self.t = 0
        self.done = self.n_slots == 0
        self.state = None if self.done else self._state()
        return self.state

    def _state(self):
        return build_state(self.ledger, self.trace, self.t, self.predict(self.t), self.manifest)

    def current_viewport(self, t):
        frame = int(round((t + 1) * self.trajectory.rate * self.dt))
        return self.trajectory.viewport(min(frame, len(self.trajectory) - 1))

    def step(self, action, eligible=None):
        if self.done:
            raise EpisodeDoneError("step() called on a finished episode")
        st = self.state
        y = future_visibility(st.viewports, self.manifest, self.frustum)
        sel = greedy_select(action, self.ledger, self.manifest, st.bandwidth, self.dt, eligible)
        reward = compute_reward(sel, y, self.ledger, self.manifest, self.weights, st.bandwidth)
        self.ledger.apply(sel)
        vis = visible_mask(self.current_viewport(self.t), self.manifest.centers,
                           self.manifest.tile_edge, self.frustum)
        info = {
            "slot": self.t,
            "selection": sel,
            "future_visible": y,
            "visible": vis,
            "budget_bits": st.bandwidth * self.dt,
            "sent_bits": sel.total_bits,
            "coverage": coverage_metric(self.ledger, vis, self.manifest),
        }
        self.t += 1
        self.done = self.t >= self.n_slots
        self.state = None if self.done else self._state()
        return self.state, reward, self.done, info
