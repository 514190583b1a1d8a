"""DDPG bitrate-adaptation agent over a variable number of tiles.

The network has a shared feature extractor (temporal self-attention over the
predicted viewports, SA + FP over tile features, cross-attention from tiles
to viewport tokens, bandwidth appended per tile) feeding an actor head
(SA + FP + per-tile linear map to L scores) and a critic head (one SA over
features and action, global max-pool, scalar MLP).
"""
from __future__ import annotations

import copy
import csv
import io
import json
import os
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .nn import (MLP, Attention, FeaturePropagation, Linear, Module,
                 SetAbstraction, Tensor, concat, make_optimizer, no_grad)
from .nn import checkpoint


@dataclass
class DdpgConfig:
    gamma: float = 0.9
    tau: float = 0.005
    batch_size: int = 60
    sigma_start: float = 0.2
    sigma_end: float = 0.02
    buffer_capacity: int = 10_000
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    optimizer: str = "sgd"
    updates_per_episode: int = 1
    per_step_updates: bool = False
    width: int = 32
    sa_centroids: int = 64
    max_group: int = 16
    radius: float | None = None     # default 2 x tile edge
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")

    def sigma(self, episode, n_episodes):
        if n_episodes <= 1:
            return self.sigma_start
        frac = min(episode / (n_episodes - 1), 1.0)
        return self.sigma_start + frac * (self.sigma_end - self.sigma_start)


class DbaNetwork(Module):
    def __init__(self, n_levels, rng, width=32, tile_edge=3.2, sa_centroids=64,
                 max_group=16, radius=None):
        W = width
        radius = 2 * tile_edge if radius is None else radius
        self.n_levels = n_levels
        # shared feature extraction
        self.vp_lift = Linear(6, W, rng)
        self.temporal = Attention(W, W, W, rng)
        self.sfe_sa = SetAbstraction(sa_centroids, radius, max_group, [6 + 3, W, W], rng)
        self.sfe_fp = FeaturePropagation([W + 6, W, W], rng)
        self.cross = Attention(W, W, W, rng)
        # actor head
        self.actor_sa = SetAbstraction(sa_centroids, radius, max_group, [W + 1 + 3, W, W], rng)
        self.actor_fp = FeaturePropagation([W + W + 1, W, W], rng)
        self.actor_out = Linear(W, n_levels, rng)
        # critic head
        self.critic_sa = SetAbstraction(sa_centroids, radius, max_group,
                                        [W + 1 + n_levels + 3, W, W], rng)
        self.critic_mlp = MLP([W, W, 1], rng)

    def head_parameters(self, which):
        """``actor`` -> actor head; ``critic`` -> shared extractor + critic head."""
        actor = {n: p for n, p in self.named_parameters().items() if n.startswith("actor_")}
        if which == "actor":
            return list(actor.values())
        return [p for n, p in self.named_parameters().items() if n not in actor]

    def features(self, batch):
        """Per-tile shared features, (B, K, W + 1)."""
        temporal_in = self.vp_lift(Tensor(batch.viewports)).leaky_relu()
        temporal = temporal_in + self.temporal(temporal_in, temporal_in)
        tiles = Tensor(batch.tiles)
        cpos, cfeat = self.sfe_sa(batch.centers, tiles)
        spatial = self.sfe_fp(cpos, cfeat, batch.centers, tiles)
        fused = spatial + self.cross(spatial, temporal)
        bw = np.broadcast_to(batch.bandwidth[:, None, None], fused.shape[:2] + (1,))
        return concat([fused, Tensor(bw)], axis=-1)

    def actor(self, batch, feats=None):
        feats = self.features(batch) if feats is None else feats
        cpos, cfeat = self.actor_sa(batch.centers, feats)
        h = self.actor_fp(cpos, cfeat, batch.centers, feats)
        return self.actor_out(h)

    def critic(self, batch, action, feats=None):
        feats = self.features(batch) if feats is None else feats
        action = action if isinstance(action, Tensor) else Tensor(action)
        if action.shape[:2] != feats.shape[:2] or action.shape[-1] != self.n_levels:
            raise ValueError(f"action shape {action.shape} does not match "
                             f"{feats.shape[:2] + (self.n_levels,)}")
        _, h = self.critic_sa(batch.centers, concat([feats, action], axis=-1))
        return self.critic_mlp(h.max(axis=1)).reshape(-1)


@dataclass
class StateBatch:
    centers: np.ndarray     # (B, K, 3) raw tile centers
    tiles: np.ndarray       # (B, K, 6) agent-facing tile features
    viewports: np.ndarray   # (B, H, 6)
    bandwidth: np.ndarray   # (B,)

    @classmethod
    def stack(cls, states):
        return cls(np.stack([s.centers for s in states]),
                   np.stack([s.agent_features for s in states]),
                   np.stack([s.agent_viewports for s in states]),
                   np.array([s.agent_bandwidth for s in states]))


def actor_forward(state, net):
    """Deterministic K x L preference scores for one state."""
    if state.n_tiles == 0:
        return np.zeros((0, net.n_levels))
    with no_grad():
        return net.actor(StateBatch.stack([state])).data[0].copy()


def critic_forward(state, action, net):
    with no_grad():
        return float(net.critic(StateBatch.stack([state]),
                                np.asarray(action, float)[None]).data[0])


def act_with_noise(state, net, sigma, rng):
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    a = actor_forward(state, net)
    if sigma == 0:
        return a
    return a + rng.normal(0.0, sigma, a.shape)


def soft_update(primary, target, tau):
    """target <- tau * primary + (1 - tau) * target, parameter-wise."""
    src, dst = primary.named_parameters(), target.named_parameters()
    if src.keys() != dst.keys():
        raise ValueError("parameter sets differ")
    for name, p in src.items():
        q = dst[name]
        if p.shape != q.shape:
            raise ValueError(f"{name}: shape {p.shape} vs {q.shape}")
        q.data = tau * p.data + (1.0 - tau) * q.data
    return target


class ReplayBuffer:
    def __init__(self, capacity):
        self.capacity = capacity
        self.items = []
        self.pos = 0

    def __len__(self):
        return len(self.items)

    def add(self, state, action, reward, next_state, done):
        item = (state, np.asarray(action, float), float(reward), next_state, bool(done))
        if len(self.items) < self.capacity:
            self.items.append(item)
        else:
            self.items[self.pos] = item
        self.pos = (self.pos + 1) % self.capacity

    def sample(self, n, rng):
        idx = rng.choice(len(self.items), size=min(n, len(self.items)), replace=False)
        return [self.items[i] for i in idx]


def _groups(batch):
    """Split transitions into runs with equal tile count so they can be stacked."""
    groups = defaultdict(list)
    for item in batch:
        groups[item[0].n_tiles].append(item)
    return [groups[k] for k in sorted(groups)]


def critic_update(batch, net, target, optimizer, gamma):
    """One step on the mean squared TD error; returns the loss before the step."""
    if not batch:
        raise ValueError("empty batch")
    net.zero_grad()
    total = None
    for group in _groups(batch):
        states = StateBatch.stack([it[0] for it in group])
        actions = np.stack([it[1] for it in group])
        y = np.array([it[2] for it in group])
        live = [i for i, it in enumerate(group) if not it[4]]
        if live and gamma > 0:
            nxt = [group[i][3] for i in live]
            with no_grad():
                boot = np.zeros(len(live))
                by_k = defaultdict(list)
                for j, s in enumerate(nxt):
                    by_k[s.n_tiles].append(j)
                for js in by_k.values():
                    sb = StateBatch.stack([nxt[j] for j in js])
                    boot[js] = target.critic(sb, target.actor(sb)).data
            y[live] += gamma * boot
        q = net.critic(states, actions)
        err = ((q - y) ** 2).sum()
        total = err if total is None else total + err
    loss = total * (1.0 / len(batch))
    loss.backward()
    optimizer.step()
    return loss.item()


def actor_update(batch, net, optimizer):
    """One ascent step on mean Q(s, pi(s)) w.r.t. the actor head only."""
    if not batch:
        raise ValueError("empty batch")
    net.zero_grad()
    total = None
    for group in _groups(batch):
        states = StateBatch.stack([it[0] for it in group])
        feats = net.features(states)
        q = net.critic(states, net.actor(states, feats), feats).sum()
        total = q if total is None else total + q
    objective = total * (1.0 / len(batch))
    (-objective).backward()
    optimizer.step()
    net.zero_grad()
    return objective.item()


ARCH_FIELDS = ("width", "sa_centroids", "max_group", "radius")


class DdpgAgent:
    def __init__(self, n_levels, config=None, tile_edge=3.2):
        self.n_levels, self.tile_edge = n_levels, tile_edge
        self.config = config or DdpgConfig()
        c = self.config
        rng = np.random.default_rng(c.seed)
        self.net = DbaNetwork(n_levels, rng, c.width, tile_edge, c.sa_centroids,
                              c.max_group, c.radius)
        self.target = copy.deepcopy(self.net)
        self.actor_opt = make_optimizer(c.optimizer, self.net.head_parameters("actor"), c.actor_lr)
        self.critic_opt = make_optimizer(c.optimizer, self.net.head_parameters("critic"), c.critic_lr)
        self.buffer = ReplayBuffer(c.buffer_capacity)
        self.rng = np.random.default_rng([c.seed, 1])

    def act(self, state, sigma=0.0):
        return act_with_noise(state, self.net, sigma, self.rng)

    def __call__(self, state):
        return actor_forward(state, self.net)

    def update(self):
        c = self.config
        batch = self.buffer.sample(c.batch_size, self.rng)
        closs = critic_update(batch, self.net, self.target, self.critic_opt, c.gamma)
        aobj = actor_update(batch, self.net, self.actor_opt)
        soft_update(self.net, self.target, c.tau)
        return closs, aobj

    def save(self, path):
        """Weights in GSNN form plus a ``.json`` sidecar describing the network."""
        checkpoint.save(path, self.net.state_dict())
        arch = {f: getattr(self.config, f) for f in ARCH_FIELDS}
        arch.update(n_levels=self.n_levels, tile_edge=self.tile_edge)
        with open(path + ".json", "w") as f:
            json.dump(arch, f, sort_keys=True)

    def load(self, path):
        self.net.load_state_dict(checkpoint.load(path))
        self.target = copy.deepcopy(self.net)

    @classmethod
    def from_checkpoint(cls, path):
        with open(path + ".json") as f:
            arch = json.load(f)
        config = DdpgConfig(**{k: arch[k] for k in ARCH_FIELDS})
        agent = cls(arch["n_levels"], config, arch["tile_edge"])
        agent.load(path)
        return agent


LOG_COLUMNS = ("episode", "mean_reward", "critic_loss", "actor_objective", "noise_sigma")


def train(env_factory, config=None, episodes=100, n_levels=None, tile_edge=None, agent=None):
    """Run the DDPG loop; returns (agent, list of per-episode log rows).

    ``env_factory(episode, rng)`` returns a fresh StreamEnv per episode.
    Updates run after each episode (``updates_per_episode`` times) or, with
    ``per_step_updates``, after every step once a batch is available.
    """
    config = config or DdpgConfig()
    env_rng = np.random.default_rng([config.seed, 2])
    if agent is None:
        try:
            probe = env_factory(0, np.random.default_rng([config.seed, 2]))
        except Exception as exc:
            raise RuntimeError(f"episode 0: {exc}") from exc
        agent = DdpgAgent(n_levels or probe.manifest.n_levels, config,
                          tile_edge or probe.manifest.tile_edge)
    log = []
    for e in range(episodes):
        try:
            env = env_factory(e, env_rng)
            state = env.reset()
            sigma = config.sigma(e, episodes)
            rewards, losses, objs = [], [], []
            while not env.done:
                action = agent.act(state, sigma)
                nxt, r, done, _ = env.step(action)
                agent.buffer.add(state, action, r, nxt, done)
                rewards.append(r)
                state = nxt
                if config.per_step_updates and len(agent.buffer) >= config.batch_size:
                    cl, ao = agent.update()
                    losses.append(cl)
                    objs.append(ao)
        except Exception as exc:
            raise RuntimeError(f"episode {e}: {exc}") from exc
        if not config.per_step_updates and len(agent.buffer) > 0:
            for _ in range(config.updates_per_episode):
                cl, ao = agent.update()
                losses.append(cl)
                objs.append(ao)
        log.append({
            "episode": e,
            "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
            "critic_loss": float(np.mean(losses)) if losses else float("nan"),
            "actor_objective": float(np.mean(objs)) if objs else float("nan"),
            "noise_sigma": sigma,
        })
        if config.checkpoint_every and config.checkpoint_dir and (e + 1) % config.checkpoint_every == 0:
            os.makedirs(config.checkpoint_dir, exist_ok=True)
            agent.save(os.path.join(config.checkpoint_dir, f"agent_ep{e + 1:05d}.gsnn"))
    return agent, log


def format_log(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in rows:
        w.writerow([row["episode"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])
    return buf.getvalue()
