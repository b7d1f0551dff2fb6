"""Field embedding, grouped layer norm and inter-field attention.

Both models run their inputs through this block. Each position carries four
fields (user, item, context, upstream-score bucket), every field is its own
normalisation group, and the fields attend to each other within a position.
"""
from __future__ import annotations

import numpy as np

from .numerics import autograd as ag
from .numerics.layers import Embedding, LayerNorm, Linear, MultiHeadAttention
from .numerics.params import ParameterSet

N_FIELDS = 4


class FeatureProcessor:
    def __init__(self, ps: ParameterSet, name: str, *, n_items: int, user_dim: int,
                 ctx_dim: int, item_dim: int, n_buckets: int, dim: int, n_heads: int,
                 rng: np.random.Generator):
        self.dim = dim
        self.user = Linear(ps, f"{name}.user", user_dim, dim, rng)
        self.ctx = Linear(ps, f"{name}.ctx", ctx_dim, dim, rng)
        self.item = Linear(ps, f"{name}.item", item_dim, dim, rng)
        self.item_id = Embedding(ps, f"{name}.item_id", n_items, dim, rng)
        self.score = Embedding(ps, f"{name}.score", n_buckets, dim, rng)
        self.gln = LayerNorm(ps, f"{name}.gln", dim, groups=N_FIELDS)
        self.field_attn = MultiHeadAttention(ps, f"{name}.field_attn", dim, n_heads, rng)

    @property
    def out_dim(self) -> int:
        return 2 * N_FIELDS * self.dim

    def user_embedding(self, user: np.ndarray, dtype) -> ag.Tensor:
        return self.user(ag.Tensor(user.astype(dtype, copy=False)))

    def __call__(self, user, ctx, item_ids, item_feats, buckets, dtype):
        """Return (flattened features (n, T, 8d), user embedding (n, d))."""
        n, t = item_ids.shape
        d = self.dim
        e_user = self.user_embedding(user, dtype)
        e_ctx = self.ctx(ag.Tensor(ctx.astype(dtype, copy=False)))
        e_item = self.item(ag.Tensor(item_feats.astype(dtype, copy=False))) \
            + self.item_id(item_ids)
        e_score = self.score(buckets)
        # static fields replicated along the sequence axis
        user_seq = ag.broadcast_to(e_user.reshape(n, 1, d), (n, t, d))
        ctx_seq = ag.broadcast_to(e_ctx.reshape(n, 1, d), (n, t, d))
        e = ag.stack([user_seq, e_item, ctx_seq, e_score], axis=2)     # (n, T, F, d)
        normed = self.gln(e).reshape(n * t, N_FIELDS, d)
        enhanced = self.field_attn(normed).reshape(n, t, N_FIELDS * d)
        # raw fields keep their scale, which the per-group normalisation removes
        flat = ag.concat([e.reshape(n, t, N_FIELDS * d), enhanced], axis=-1)
        return flat, e_user


def fit_score_edges(scores: np.ndarray, n_buckets: int) -> np.ndarray:
    """Interior quantile edges, stored as float32 so a reloaded model buckets identically."""
    qs = np.linspace(0, 1, n_buckets + 1)[1:-1]
    return np.quantile(np.asarray(scores, dtype=np.float64).ravel(), qs).astype(np.float32)


def bucketize(scores: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, np.asarray(scores, dtype=np.float32), side="right")
