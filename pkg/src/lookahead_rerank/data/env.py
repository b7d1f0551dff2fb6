"""Synthetic click environment with an exactly computable list value.

A click at position t is Bernoulli with logit

    intercept + quality[item] + user @ A @ feats[item] + ctx @ w_ctx
      - position_decay * (t - 1) + pair[cat(prev item), cat(item)]

where the pair term penalises two adjacent items of the same category and
rewards fixed complementary category pairs. An item's category is the arg-max
of a fixed random projection of its features. Clicks are independent given
the list, so the expected total clicks of a prefix is the sum of its click
probabilities.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from itertools import product
from pathlib import Path

import numpy as np

from .types import RequestBatch, RerankRequest


@dataclass(frozen=True)
class EnvParams:
    seed: int = 0
    n_items: int = 200
    n_categories: int = 6
    user_dim: int = 4
    ctx_dim: int = 4
    item_dim: int = 4
    intercept: float = -1.0
    position_decay: float = 0.3
    substitution: float = 2.0
    complement: float = 1.0
    quality_scale: float = 1.0
    affinity_scale: float = 0.5
    ctx_scale: float = 0.3
    score_noise: float = 0.8
    decimals: int = 4


class EnvSpec:
    """Seeded latent parameters plus the click-probability function."""

    def __init__(self, params: EnvParams | None = None, **overrides):
        params = params or EnvParams()
        if overrides:
            params = EnvParams(**{**asdict(params), **overrides})
        self.params = params
        p = params
        rng = np.random.default_rng(np.random.SeedSequence([p.seed, 0x5EED]))
        self.item_feats = np.round(rng.standard_normal((p.n_items, p.item_dim)), p.decimals)
        # categories partition the item feature space, so similar items substitute
        cat_proj = rng.standard_normal((p.item_dim, p.n_categories))
        self.item_category = np.argmax(self.item_feats @ cat_proj, axis=1)
        w_q = rng.standard_normal(p.item_dim) / np.sqrt(p.item_dim)
        self.item_quality = p.quality_scale * (
            0.7 * self.item_feats @ w_q + 0.7 * rng.standard_normal(p.n_items))
        self.affinity = p.affinity_scale * rng.standard_normal((p.user_dim, p.item_dim)) \
            / np.sqrt(p.item_dim)
        self.ctx_weight = p.ctx_scale * rng.standard_normal(p.ctx_dim)
        k = p.n_categories
        pair = np.zeros((k, k))
        pair[np.arange(k), np.arange(k)] = -p.substitution
        pair[np.arange(k), (np.arange(k) + 1) % k] = p.complement
        self.pair = pair

    # persistence

    def to_dict(self) -> dict:
        return asdict(self.params)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        known = {f.name for f in fields(EnvParams)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown env parameters: {sorted(unknown)}")
        return cls(EnvParams(**d))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EnvSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    # click model

    def point_logits(self, batch: RequestBatch) -> np.ndarray:
        """Position- and neighbour-free part of the click logit, shape (R, N)."""
        ids = batch.item_ids
        feats = self.item_feats[ids]                              # (R, N, Di)
        aff = np.einsum("ru,uv,rnv->rn", batch.user, self.affinity, feats)
        ctx = batch.ctx @ self.ctx_weight
        return self.params.intercept + self.item_quality[ids] + aff + ctx[:, None]

    def click_probs(self, batch: RequestBatch, rows: np.ndarray, positions: np.ndarray,
                    point: np.ndarray | None = None) -> np.ndarray:
        """Click probability at every position of each list.

        rows: (n,) request row per list; positions: (n, T) candidate slots.
        """
        rows = np.asarray(rows)
        positions = np.asarray(positions)
        if point is None:
            point = self.point_logits(batch)
        t = positions.shape[1]
        logit = point[rows[:, None], positions]
        logit = logit - self.params.position_decay * np.arange(t)
        if t > 1:
            cats = self.item_category[batch.item_ids[rows[:, None], positions]]
            logit[:, 1:] += self.pair[cats[:, :-1], cats[:, 1:]]
        return 1.0 / (1.0 + np.exp(-logit))

    def list_values(self, batch: RequestBatch, rows, positions, point=None) -> np.ndarray:
        """Expected total clicks of each list, shape (n,)."""
        positions = np.asarray(positions)
        if positions.shape[1] == 0:
            return np.zeros(positions.shape[0])
        return self.click_probs(batch, rows, positions, point).sum(axis=1)

    def sample_scores(self, batch: RequestBatch, rng: np.random.Generator) -> np.ndarray:
        """Upstream ranking scores: noisy point-wise click estimates in (0, 1)."""
        z = self.point_logits(batch) + self.params.score_noise * rng.standard_normal(
            batch.item_ids.shape)
        return np.round(1.0 / (1.0 + np.exp(-z)), self.params.decimals)


def env_list_value(env: EnvSpec, request: RerankRequest, items) -> float:
    """Exact expected total clicks of ``items`` shown in order for ``request``."""
    pos = request.positions(items)
    if not pos:
        return 0.0
    batch = RequestBatch.from_requests([request])
    return float(env.list_values(batch, np.zeros(1, dtype=int), np.array([pos]))[0])


def env_prefix_values(env: EnvSpec, request: RerankRequest, items) -> np.ndarray:
    """Expected cumulative clicks after each prefix length 1..T."""
    pos = request.positions(items)
    batch = RequestBatch.from_requests([request])
    probs = env.click_probs(batch, np.zeros(1, dtype=int), np.array([pos]))[0]
    return np.cumsum(probs)


def count_distribution(probs) -> np.ndarray:
    """Exact pmf of the number of clicks by enumerating all 2^T outcomes."""
    probs = np.asarray(probs, dtype=np.float64)
    pmf = np.zeros(len(probs) + 1)
    for outcome in product((0, 1), repeat=len(probs)):
        o = np.array(outcome)
        pmf[o.sum()] += np.prod(np.where(o == 1, probs, 1.0 - probs))
    return pmf
