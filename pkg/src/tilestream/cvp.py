"""Collaborative viewport prediction.

Two priors are merged to predict the next H viewports from the last H:

* collaborative: the whole user-embedding table attends over the projected
  history (temporal attention), then the current user's embedding attends
  over those per-user rows (inter-user attention);
* historical: a per-step MLP lifts each viewport to 16 channels, each channel's
  length-H series becomes one token (inverted encoding), one self-attention
  block mixes the tokens, and the tokens are mean-pooled.

Inputs are scaled before entering the network: positions by the scene
half-extent, angles by 1/180. Angles are first shifted by a multiple of 360 so
the newest history yaw/pitch/roll lie in [-180, 180); the shift is added back
to the prediction.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .nn import (MLP, Attention, Linear, Module, ShapeError, Tensor, UserEmbeddingTable,
                 concat, make_optimizer, no_grad)
from .nn import checkpoint
from .viewport import Viewport

log = logging.getLogger(__name__)


class CvpConfigError(ValueError):
    pass


@dataclass
class CvpConfig:
    horizon: int = 30
    embed_dim: int = 16
    hidden: int = 32
    lr: float = 1e-5
    optimizer: str = "sgd"
    batch_size: int = 64
    epochs: int = 10
    windows_per_epoch: int | None = None   # None: every window once per epoch
    disable_cpe: bool = False
    disable_hpe: bool = False
    position_scale: float = 4.8            # scene half-extent in meters
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise CvpConfigError("horizon must be >= 1")
        if self.disable_cpe and self.disable_hpe:
            raise CvpConfigError("cannot disable both priors")


class CvpModel(Module):
    def __init__(self, user_ids, config=None):
        self.config = c = config or CvpConfig()
        rng = np.random.default_rng(c.seed)
        H, D, W = c.horizon, c.embed_dim, c.hidden
        self.embeddings = UserEmbeddingTable(user_ids, D, rng)
        self.cpe_proj = Linear(6, D, rng)
        self.cpe_temporal = Attention(D, D, D, rng)
        self.cpe_users = Attention(D, D, D, rng)
        self.hpe_mlp = MLP([6, D, D], rng)
        self.hpe_embed = Linear(H, D, rng)
        self.hpe_attn = Attention(D, D, D, rng)
        self.merge = MLP([2 * D, W, W], rng, final_activation=True)
        self.pos_head = MLP([W, W, H * 3], rng)
        self.rot_head = MLP([W, W, H * 3], rng)

    # -- normalisation ---------------------------------------------------
    def encode(self, windows):
        """(B, H, 6) raw -> scaled array plus the per-window angle shift."""
        windows = np.asarray(windows, dtype=np.float64)
        shift = 360.0 * np.floor((windows[:, -1, 3:] + 180.0) / 360.0)
        x = np.empty_like(windows)
        x[..., :3] = windows[..., :3] / self.config.position_scale
        x[..., 3:] = (windows[..., 3:] - shift[:, None, :]) / 180.0
        return x, shift

    def decode(self, y, shift):
        out = np.empty_like(y)
        out[..., :3] = y[..., :3] * self.config.position_scale
        out[..., 3:] = y[..., 3:] * 180.0 + shift[:, None, :]
        return out

    # -- priors ----------------------------------------------------------
    def cpe(self, user_ids, x):
        """Collaborative prior (B, D) from user ids and scaled history (B, H, 6)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        kv = self.cpe_proj(x)                                    # (B, H, D)
        per_user = self.cpe_temporal(self.embeddings.table, kv)  # (B, U, D)
        query = self.embeddings(user_ids).reshape(len(user_ids), 1, -1)
        return self.cpe_users(query, per_user).reshape(len(user_ids), -1)

    def hpe(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        H = self.config.horizon
        if x.shape[-2] != H:
            raise ShapeError(f"history length {x.shape[-2]} != horizon {H}")
        lifted = self.hpe_mlp(x)                      # (B, H, D)
        tokens = self.hpe_embed(lifted.swapaxes(-1, -2))  # (B, D channels, D)
        tokens = tokens + self.hpe_attn(tokens, tokens)
        return tokens.mean(axis=1)

    def forward_scaled(self, user_ids, x):
        """Scaled prediction Tensor (B, H, 6)."""
        c = self.config
        B, H, D = len(user_ids), c.horizon, c.embed_dim
        if x.shape[1] != H:
            raise ShapeError(f"history length (axis 1) {x.shape[1]} != horizon {H}")
        zeros = Tensor(np.zeros((B, D)))
        parts = [zeros if c.disable_cpe else self.cpe(user_ids, x),
                 zeros if c.disable_hpe else self.hpe(x)]
        h = self.merge(concat(parts, axis=-1))
        pos = self.pos_head(h).reshape(B, H, 3)
        rot = self.rot_head(h).reshape(B, H, 3)
        return concat([pos, rot], axis=-1)

    def predict_batch(self, user_ids, histories):
        x, shift = self.encode(histories)
        with no_grad():
            y = self.forward_scaled(list(user_ids), x).data
        return self.decode(y, shift)

    def save(self, path):
        checkpoint.save(path, self.state_dict())
        with open(path + ".users", "w") as f:
            for i, u in enumerate(self.embeddings.user_ids):
                f.write(f"{u},{i}\n")

    @classmethod
    def load(cls, path, config=None):
        users = []
        with open(path + ".users") as f:
            for line in f:
                if line.strip():
                    uid, row = line.strip().rsplit(",", 1)
                    users.append((int(row), uid))
        users = [u for _, u in sorted(users)]
        state = checkpoint.load(path)
        config = config or CvpConfig(horizon=state["hpe_embed.weight"].shape[0])
        model = cls(users, config)
        model.load_state_dict(state)
        return model


def cpe_forward(user_id, history, model):
    x, _ = model.encode(np.asarray(history, float)[None])
    with no_grad():
        return model.cpe([user_id], x).data[0]


def hpe_forward(history, model):
    x, _ = model.encode(np.asarray(history, float)[None])
    with no_grad():
        return model.hpe(x).data[0]


def predict(user_id, history, model):
    """Next H viewports for one user from their last H viewports."""
    out = model.predict_batch([user_id], np.asarray(history, float)[None])[0]
    return [Viewport.from_vector(v) for v in out]


def mae(pred, target):
    return float(np.abs(np.asarray(pred) - np.asarray(target)).mean())


# --------------------------------------------------------------------------
# datasets


class WindowSet:
    """All (history, target) windows with stride 1 over a list of trajectories."""

    def __init__(self, trajectories, horizon, users=None):
        H = horizon
        self.horizon = H
        self.sources = []  # (trajectory, start)
        for traj in trajectories:
            if users is not None and traj.user_id not in users:
                continue
            n = len(traj) - 2 * H + 1
            if n <= 0:
                log.warning("skipping %s/%s: %d frames < 2H=%d",
                            traj.user_id, traj.scene_id, len(traj), 2 * H)
                continue
            self.sources.extend((traj, s) for s in range(n))

    def __len__(self):
        return len(self.sources)

    def batch(self, idx):
        H = self.horizon
        users = [self.sources[i][0].user_id for i in idx]
        hist = np.stack([self.sources[i][0].samples[s:s + H] for i in idx
                         for s in [self.sources[i][1]]])
        tgt = np.stack([self.sources[i][0].samples[s + H:s + 2 * H] for i in idx
                        for s in [self.sources[i][1]]])
        return users, hist, tgt


def window_loss(model, users, hist, tgt):
    x, shift = model.encode(hist)
    y = tgt.copy()
    y[..., :3] = tgt[..., :3] / model.config.position_scale
    y[..., 3:] = (tgt[..., 3:] - shift[:, None, :]) / 180.0
    return (model.forward_scaled(users, x) - y).abs().mean()


def train_cvp(dataset, config=None, model=None):
    """Minibatch training on the window MAE; returns (model, per-epoch MAE list)."""
    config = config or CvpConfig()
    if model is None:
        users = sorted({t.user_id for t in dataset})
        model = CvpModel(users, config)
    windows = WindowSet(dataset, config.horizon, set(model.embeddings.user_ids))
    if len(windows) == 0:
        raise ValueError("no trajectory is long enough to form a training window")
    rng = np.random.default_rng([config.seed, 7])
    opt = make_optimizer(config.optimizer, model.parameters(), config.lr)
    curve = []
    for _ in range(config.epochs):
        n = len(windows) if config.windows_per_epoch is None else config.windows_per_epoch
        order = rng.permutation(len(windows))
        if n > len(windows):
            order = rng.choice(len(windows), n, replace=True)
        order = order[:n]
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            loss = window_loss(model, *windows.batch(idx))
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / n)
    return model, curve


def evaluate_mae(model, dataset, stride=1, batch_size=256):
    """(position MAE in meters, rotation MAE in degrees) over held-out windows."""
    windows = WindowSet(dataset, model.config.horizon, set(model.embeddings.user_ids))
    idx_all = np.arange(0, len(windows), stride)
    if len(idx_all) == 0:
        raise ValueError("no valid evaluation windows")
    pos_err = rot_err = 0.0
    for start in range(0, len(idx_all), batch_size):
        idx = idx_all[start:start + batch_size]
        users, hist, tgt = windows.batch(idx)
        pred = model.predict_batch(users, hist)
        err = np.abs(pred - tgt)
        pos_err += err[..., :3].mean(axis=(1, 2)).sum()
        rot_err += err[..., 3:].mean(axis=(1, 2)).sum()
    return pos_err / len(idx_all), rot_err / len(idx_all)


def cvp_predictor(model, rate_default=30.0):
    """Adapter for StreamEnv: predicted viewports at slot ``t`` from the last H frames."""
    H = model.config.horizon

    def predictor(trajectory, t, horizon, dt):
        frame = int(round(t * trajectory.rate * dt))
        lo = frame - H + 1
        idx = np.clip(np.arange(lo, frame + 1), 0, len(trajectory) - 1)
        pred = model.predict_batch([trajectory.user_id], trajectory.samples[idx][None])[0]
        if horizon != H:
            pick = np.linspace(0, H - 1, horizon).round().astype(int)
            pred = pred[pick]
        return pred
    return predictor
