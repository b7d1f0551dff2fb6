from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RerankConfig:
    n_candidates: int = 12
    list_len: int = 6
    embed_dim: int = 16
    d_model: int = 32
    d_pos: int = 8
    n_heads: int = 2
    ff_dim: int = 64
    evaluator_layers: int = 6
    generator_layers: int = 4
    beam_size: int = 4
    alpha: float = 0.01
    tau_w: float = 0.5
    learning_rate: float = 5e-4
    batch_size: int = 1024
    topk: int = 12
    n_score_buckets: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.list_len <= self.n_candidates:
            raise ValueError(f"need 1 <= list_len <= n_candidates, got "
                             f"L={self.list_len}, N={self.n_candidates}")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.tau_w <= 0:
            raise ValueError("tau_w must be > 0")
        if not 1 <= self.topk <= self.n_candidates:
            raise ValueError("topk must be in [1, n_candidates]")


@dataclass(frozen=True)
class Item:
    id: int
    feats: tuple[float, ...]
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"item {self.id}: non-finite score")


@dataclass(frozen=True)
class RerankRequest:
    request_id: int
    user_id: int
    user_feats: tuple[float, ...]
    ctx_feats: tuple[float, ...]
    candidates: tuple[Item, ...]

    def __post_init__(self):
        ids = [c.id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValueError(f"request {self.request_id}: duplicate candidate ids")

    @property
    def candidate_ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.candidates)

    def positions(self, item_ids) -> list[int]:
        """Candidate slots of ``item_ids``; rejects duplicates and foreign ids."""
        lookup = {c.id: i for i, c in enumerate(self.candidates)}
        out = []
        for item in item_ids:
            if item not in lookup:
                raise ValueError(f"request {self.request_id}: item {item} is not a candidate")
            out.append(lookup[item])
        if len(set(out)) != len(out):
            raise ValueError(f"request {self.request_id}: duplicate items in list {list(item_ids)}")
        return out


@dataclass(frozen=True)
class ExposureRecord:
    request: RerankRequest
    exposed: tuple[int, ...]
    clicks: tuple[int, ...]

    def __post_init__(self):
        self.request.positions(self.exposed)
        if len(self.clicks) != len(self.exposed):
            raise ValueError(f"request {self.request.request_id}: "
                             f"{len(self.clicks)} clicks for {len(self.exposed)} exposed items")
        if any(c not in (0, 1) for c in self.clicks):
            raise ValueError(f"request {self.request.request_id}: clicks must be 0/1")

    @property
    def cumulative(self) -> tuple[int, ...]:
        """y_t: clicks accumulated up to and including position t."""
        return tuple(int(v) for v in np.cumsum(self.clicks))


@dataclass
class RequestBatch:
    """Column-stacked view of requests for vectorised models and the env."""

    request_ids: np.ndarray          # (R,)
    user: np.ndarray                 # (R, Du)
    ctx: np.ndarray                  # (R, Dc)
    item_ids: np.ndarray             # (R, N) int
    item_feats: np.ndarray           # (R, N, Di)
    scores: np.ndarray               # (R, N)
    _index: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_requests(cls, requests) -> "RequestBatch":
        requests = list(requests)
        if not requests:
            raise ValueError("no requests")
        n = len(requests[0].candidates)
        if any(len(r.candidates) != n for r in requests):
            raise ValueError("all requests must have the same candidate count")
        return cls(
            request_ids=np.array([r.request_id for r in requests], dtype=np.int64),
            user=np.array([r.user_feats for r in requests], dtype=np.float64),
            ctx=np.array([r.ctx_feats for r in requests], dtype=np.float64),
            item_ids=np.array([[c.id for c in r.candidates] for r in requests], dtype=np.int64),
            item_feats=np.array([[c.feats for c in r.candidates] for r in requests],
                                dtype=np.float64),
            scores=np.array([[c.score for c in r.candidates] for r in requests],
                            dtype=np.float64),
        )

    def __len__(self) -> int:
        return len(self.request_ids)

    @property
    def n_candidates(self) -> int:
        return self.item_ids.shape[1]

    def take(self, idx) -> "RequestBatch":
        idx = np.asarray(idx)
        return RequestBatch(self.request_ids[idx], self.user[idx], self.ctx[idx],
                            self.item_ids[idx], self.item_feats[idx], self.scores[idx])

    def row_of(self, request_id: int) -> int:
        if not self._index:
            self._index.update({int(r): i for i, r in enumerate(self.request_ids)})
        return self._index[int(request_id)]

    def ids_to_positions(self, rows: np.ndarray, item_ids: np.ndarray) -> np.ndarray:
        """Map item ids (n, T) for request rows (n,) to candidate slots."""
        cand = self.item_ids[rows]                        # (n, N)
        hit = cand[:, None, :] == np.asarray(item_ids)[:, :, None]
        if not hit.any(axis=-1).all():
            raise ValueError("item id not among the request's candidates")
        return hit.argmax(axis=-1)
