"""Layers built on the tape: linear/MLP, attention, point-set layers, embeddings.

All layers are batch-first. Point-set layers take raw positions as plain
numpy arrays (no gradient flows into geometry) and features as Tensors.
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor, ShapeError, concat, gather_rows


class Module:
    """Parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            value = np.asarray(state[k], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, zero=False):
        bound = 1.0 / np.sqrt(d_in)
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        self.weight = _param(w)
        self.bias = _param(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects last axis {self.d_in}, got {x.shape[-1]}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Stack of Linear layers with leaky-ReLU (slope 0.01) between them."""

    def __init__(self, sizes, rng, final_activation=False, zero_last=False):
        n = len(sizes) - 1
        self.layers = [Linear(sizes[i], sizes[i + 1], rng, zero=zero_last and i == n - 1)
                       for i in range(n)]
        self.final_activation = final_activation

    def forward(self, x):
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_activation:
                x = x.leaky_relu()
        return x


class Attention(Module):
    """Single-head scaled dot-product attention with learned projections.

    ``softmax(q Wq (k Wk)^T / sqrt(d_k)) v Wv``, softmax over the key axis.
    """

    def __init__(self, d_query, d_key, d_k, rng, d_value=None):
        d_value = d_key if d_value is None else d_value
        self.w_q = _param(rng.normal(0, 1 / np.sqrt(d_query), (d_query, d_k)))
        self.w_k = _param(rng.normal(0, 1 / np.sqrt(d_key), (d_key, d_k)))
        self.w_v = _param(rng.normal(0, 1 / np.sqrt(d_value), (d_value, d_k)))
        self.d_k = d_k

    def _check(self, q, k, v):
        for label, x, w in (("query", q, self.w_q), ("key", k, self.w_k),
                            ("value", v, self.w_v)):
            if x.shape[-1] != w.shape[0]:
                raise ShapeError(f"{label} feature axis (-1) is {x.shape[-1]}, "
                                 f"projection expects {w.shape[0]}")
        if k.shape[-2] != v.shape[-2]:
            raise ShapeError(f"key rows (axis -2) {k.shape[-2]} != value rows {v.shape[-2]}")

    def weights(self, q, k):
        logits = (q @ self.w_q) @ (k @ self.w_k).T * (1.0 / np.sqrt(self.d_k))
        return logits.softmax(axis=-1)

    def forward(self, q, k, v=None):
        v = k if v is None else v
        self._check(q, k, v)
        return self.weights(q, k) @ (v @ self.w_v)


def lexicographic_rank(points):
    """Rank of each point under (x, y, z) lexicographic order, per batch row."""
    B, N, _ = points.shape
    order = np.empty((B, N), dtype=np.int64)
    for b in range(B):
        p = points[b]
        order[b] = np.lexsort((p[:, 2], p[:, 1], p[:, 0]))
    return order


def farthest_point_sample(points, m):
    """Farthest-point sampling seeded at the lexicographically smallest point.

    Ties in distance go to the lexicographically smaller point, so the result
    does not depend on input order. Returns indices (B, m) into ``points``.
    """
    B, N, _ = points.shape
    m = min(m, N)
    order = lexicographic_rank(points)
    sorted_pts = np.take_along_axis(points, order[..., None], axis=1)
    chosen = np.zeros((B, m), dtype=np.int64)
    dist = np.full((B, N), np.inf)
    cur = np.zeros(B, dtype=np.int64)
    rows = np.arange(B)
    for i in range(m):
        chosen[:, i] = cur
        d = ((sorted_pts - sorted_pts[rows, cur][:, None, :]) ** 2).sum(-1)
        dist = np.minimum(dist, d)
        cur = np.argmax(dist, axis=1)
    return np.take_along_axis(order, chosen, axis=1)


def ball_query(points, centroids, radius, max_group):
    """Members within ``radius`` of each centroid, nearest first, capped.

    Groups shorter than ``max_group`` are padded with their nearest member
    (the centroid itself when it belongs to the set). Returns (B, M, G) indices.
    """
    B, N, _ = points.shape
    M = centroids.shape[1]
    G = min(max_group, N)
    rank = np.argsort(lexicographic_rank(points), axis=1)  # position -> lex rank
    d2 = ((centroids[:, :, None, :] - points[:, None, :, :]) ** 2).sum(-1)
    out = np.empty((B, M, G), dtype=np.int64)
    for b in range(B):
        for j in range(M):
            inside = np.nonzero(d2[b, j] <= radius * radius)[0]
            if inside.size == 0:
                inside = np.array([np.argmin(d2[b, j])])
            key = np.lexsort((rank[b, inside], d2[b, j, inside]))
            members = inside[key][:G]
            out[b, j, :members.size] = members
            out[b, j, members.size:] = members[0]
    return out


class SetAbstraction(Module):
    """Sample centroids by FPS, group by radius, max-pool a shared MLP.

    Member inputs are ``[features, (pos - centroid) / radius]``.
    """

    def __init__(self, n_centroids, radius, max_group, mlp_sizes, rng):
        self.n_centroids = n_centroids
        self.radius = float(radius)
        self.max_group = max_group
        self.mlp = MLP(mlp_sizes, rng, final_activation=True)
        self._cache = OrderedDict()

    def group(self, positions):
        """Centroid indices (B, M) and group indices (B, M, G); cached per row."""
        rows = [_cached(self._cache, (row.shape, row.tobytes()),
                        lambda row=row: self._group_one(row)) for row in positions]
        return np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows])

    def _group_one(self, row):
        row = row[None]
        cidx = farthest_point_sample(row, self.n_centroids)
        centroids = np.take_along_axis(row, cidx[..., None], axis=1)
        gidx = ball_query(row, centroids, self.radius, self.max_group)
        return cidx[0], gidx[0]

    def forward(self, positions, features):
        positions = np.asarray(positions, dtype=np.float64)
        cidx, gidx = self.group(positions)
        centroids = np.take_along_axis(positions, cidx[..., None], axis=1)
        rel = (gather_rows(positions, gidx) - centroids[:, :, None, :]) / self.radius
        grouped = features[_batch_index(gidx), gidx]
        h = self.mlp(concat([grouped, Tensor(rel)], axis=-1))
        return centroids, h.max(axis=2)


def _cached(cache, key, compute, limit=4096):
    hit = cache.get(key)
    if hit is None:
        hit = compute()
        cache[key] = hit
        if len(cache) > limit:
            cache.popitem(last=False)
    return hit


def _batch_index(index):
    B = index.shape[0]
    return np.arange(B).reshape((B,) + (1,) * (index.ndim - 1))


def interpolation_weights(coarse, fine, k=3):
    """Inverse-distance weights of the k nearest coarse points for each fine point.

    A fine point that coincides with a coarse point puts weight 1 on it.
    Returns (indices, weights), each (B, Nf, k') with k' = min(k, Nc).
    """
    d = np.sqrt(((fine[:, :, None, :] - coarse[:, None, :, :]) ** 2).sum(-1))
    k = min(k, coarse.shape[1])
    idx = np.argsort(d, axis=-1, kind="stable")[..., :k]
    dk = np.take_along_axis(d, idx, axis=-1)
    zero = dk[..., :1] == 0.0
    with np.errstate(divide="ignore"):
        inv = np.where(dk > 0, 1.0 / np.where(dk > 0, dk, 1.0), 0.0)
    w = inv / np.where(zero, 1.0, inv.sum(-1, keepdims=True))
    onehot = np.zeros_like(w)
    onehot[..., 0] = 1.0
    w = np.where(zero, onehot, w)
    return idx, w


class FeaturePropagation(Module):
    """Interpolate coarse features onto fine points, concat skip, shared MLP."""

    def __init__(self, mlp_sizes, rng, k_neighbors=3):
        self.k_neighbors = k_neighbors
        self.mlp = MLP(mlp_sizes, rng, final_activation=True)
        self._cache = OrderedDict()

    def weights(self, coarse, fine):
        rows = [_cached(self._cache, (c.shape, f.shape, c.tobytes(), f.tobytes()),
                        lambda c=c, f=f: interpolation_weights(c[None], f[None],
                                                               self.k_neighbors))
                for c, f in zip(coarse, fine)]
        return (np.concatenate([r[0] for r in rows]), np.concatenate([r[1] for r in rows]))

    def forward(self, coarse_pos, coarse_feat, fine_pos, skip=None):
        idx, w = self.weights(np.asarray(coarse_pos, float), np.asarray(fine_pos, float))
        neigh = coarse_feat[_batch_index(idx), idx]          # (B, Nf, k, C)
        interp = (neigh * Tensor(w[..., None])).sum(axis=2)
        x = interp if skip is None else concat([interp, skip], axis=-1)
        return self.mlp(x)


class UserEmbeddingTable(Module):
    """Learnable per-user embedding rows, addressed by user id."""

    def __init__(self, user_ids, dim, rng):
        self.user_ids = list(user_ids)
        self._row = {u: i for i, u in enumerate(self.user_ids)}
        if len(self._row) != len(self.user_ids):
            raise ValueError("duplicate user ids")
        self.table = _param(rng.normal(0, 1.0, (len(self.user_ids), dim)))
        self.dim = dim

    def rows(self, user_ids):
        try:
            return np.array([self._row[u] for u in user_ids], dtype=np.int64)
        except KeyError as e:
            raise LookupError(f"unknown user id {e.args[0]!r}") from None

    def forward(self, user_ids):
        return self.table[self.rows(user_ids)]
