"""Encoder-decoder list generator with candidate-constrained pointer decoding.

The encoder attends over the whole candidate set without positional input,
so it is permutation-equivariant over candidates. The decoder starts from a
projection of the user embedding, consumes the encoder rows of the items it
has already picked and points back into the encoder rows; picked items are
masked out, so every generated list is a valid ordered selection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._base import NeuralEstimator
from ._features import FeatureProcessor, bucketize, fit_score_edges
from .data.types import ExposureRecord, RequestBatch
from .evaluator import _rows
from .numerics import autograd as ag
from .numerics.layers import Linear, TransformerStack

ABLATIONS = ("full", "no_soft", "no_weight", "no_hard", "exposure_only")


def pointer_probs(h_dec: np.ndarray, memory: np.ndarray, available: np.ndarray) -> np.ndarray:
    """P(i) proportional to exp(h . m_i) over available candidates, 0 elsewhere.

    h_dec: (..., d); memory: (..., N, d); available: (..., N) bool.
    """
    logits = np.einsum("...d,...nd->...n", np.asarray(h_dec, dtype=np.float64),
                       np.asarray(memory, dtype=np.float64))
    return ag.masked_softmax(ag.Tensor(logits), available).data


def availability(sequence: np.ndarray, n: int) -> np.ndarray:
    """avail[b, t, j]: candidate j not chosen before step t. sequence: (B, L) slots."""
    b, steps = sequence.shape
    avail = np.ones((b, steps, n), dtype=bool)
    rows = np.arange(b)
    for t in range(1, steps):
        avail[:, t] = avail[:, t - 1]
        avail[rows, t, sequence[:, t - 1]] = False
    return avail


def gen_loss(logp: ag.Tensor, available: np.ndarray, hard: np.ndarray, soft: np.ndarray,
             weights: np.ndarray, alpha: float, use_hard: bool = True) -> ag.Tensor:
    """Weighted hybrid distillation loss, averaged over the lists in the batch.

    Per list: weight * sum_t [CE(hard_t, P_t) + alpha * KL(q_t || P_t)],
    with KL taken over the available candidates only.
    """
    available = np.asarray(available, dtype=bool)
    soft = np.asarray(soft)
    bad = (soft > 0) & ~available
    if bad.any():
        step = int(np.argwhere(bad)[0][-2])
        raise ValueError(f"soft label puts mass on an unavailable candidate at step {step}")
    hard = np.asarray(hard)
    if not np.take_along_axis(available, hard[..., None], axis=-1).all():
        step = int(np.argwhere(~np.take_along_axis(available, hard[..., None], -1)[..., 0])[0][-1])
        raise ValueError(f"hard label is not available at step {step}")
    terms = None
    if use_hard:
        terms = ag.cross_entropy(logp, hard)
    if alpha:
        kl = ag.kl_divergence(soft, logp, available) * alpha
        terms = kl if terms is None else terms + kl
    if terms is None:
        raise ValueError("loss has no terms: hard labels dropped and alpha == 0")
    per_list = ag.sum_(terms, axis=-1) * np.asarray(weights, dtype=logp.dtype)
    return ag.sum_(per_list) * (1.0 / per_list.shape[0])


@dataclass
class DistillationTargets:
    """Teacher-forcing inputs aligned to a RequestBatch."""

    batch: RequestBatch
    rows: np.ndarray        # (n,)
    sequence: np.ndarray    # (n, L) candidate slots; also the hard labels
    soft: np.ndarray        # (n, L, N)
    weight: np.ndarray      # (n,)
    source: str

    @classmethod
    def from_supervision(cls, records, requests) -> "DistillationTargets":
        records = list(records)
        batch = requests if isinstance(requests, RequestBatch) \
            else RequestBatch.from_requests(requests)
        rows = np.array([batch.row_of(r.request_id) for r in records])
        seq = batch.ids_to_positions(rows, np.array([r.sequence for r in records]))
        n, steps = seq.shape
        soft = np.zeros((n, steps, batch.n_candidates))
        for i, rec in enumerate(records):
            lookup = {int(v): j for j, v in enumerate(batch.item_ids[rows[i]])}
            for t, q in enumerate(rec.soft):
                for item, p in q.items():
                    soft[i, t, lookup[item]] = p
        weight = np.array([r.effective_weight for r in records])
        return cls(batch, rows, seq, soft, weight, "supervision")

    @classmethod
    def from_exposures(cls, records) -> "DistillationTargets":
        records = list(records)
        batch = RequestBatch.from_requests(r.request for r in records)
        rows = np.arange(len(records))
        seq = np.array([r.request.positions(r.exposed) for r in records])
        soft = np.zeros(seq.shape + (batch.n_candidates,))
        return cls(batch, rows, seq, soft, np.ones(len(records)), "exposures")


class OnlineGenerator(NeuralEstimator):
    """Single-pass greedy list generator trained by hybrid distillation.

    ``fit`` takes mined supervision records plus their requests (or, for the
    ``exposure_only`` ablation, logged exposure records); ``predict`` returns
    one ranked item-id tuple per request.
    """

    _kind = "generator"

    def __init__(self, n_items=200, list_len=6, embed_dim=16, d_model=32, d_pos=8,
                 n_layers=4, n_heads=2, ff_dim=64, n_score_buckets=16, alpha=0.01,
                 ablation="full", learning_rate=5e-4, lr_schedule="constant", weight_decay=0.0, batch_size=1024, n_epochs=10,
                 random_state=0, dtype="float32"):
        self.n_items = n_items
        self.list_len = list_len
        self.embed_dim = embed_dim
        self.d_model = d_model
        self.d_pos = d_pos
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ff_dim = ff_dim
        self.n_score_buckets = n_score_buckets
        self.alpha = alpha
        self.ablation = ablation
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.random_state = random_state
        self.dtype = dtype

    def _build(self, dims, rng):
        ps = self.params_
        self.features_ = FeatureProcessor(
            ps, "feat", n_items=self.n_items, user_dim=dims["user_dim"],
            ctx_dim=dims["ctx_dim"], item_dim=dims["item_dim"],
            n_buckets=self.n_score_buckets, dim=self.embed_dim, n_heads=self.n_heads, rng=rng)
        self.enc_proj_ = Linear(ps, "enc_proj", self.features_.out_dim, self.d_model, rng)
        self.encoder_ = TransformerStack(ps, "encoder", self.n_layers, self.d_model,
                                         self.n_heads, self.ff_dim, rng)
        self.start_ = Linear(ps, "start", self.embed_dim, self.d_model, rng)
        ps.init_uniform("dec_pos.table", (self.list_len, self.d_pos), self.d_pos, rng)
        self.dec_proj_ = Linear(ps, "dec_proj", self.d_model + self.d_pos, self.d_model, rng)
        self.decoder_ = TransformerStack(ps, "decoder", self.n_layers, self.d_model,
                                         self.n_heads, self.ff_dim, rng)

    def initialize(self, batch: RequestBatch) -> "OnlineGenerator":
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        self._init_params({"user_dim": batch.user.shape[1], "ctx_dim": batch.ctx.shape[1],
                           "item_dim": batch.item_feats.shape[2]})
        self.buffers_ = {"score_edges": fit_score_edges(batch.scores, self.n_score_buckets)}
        self.history_ = []
        return self

    # network pieces

    def encode_candidates(self, batch: RequestBatch, rows) -> ag.Tensor:
        """Context-aware candidate rows M of shape (n, N, d_model)."""
        self._check_fitted()
        rows = np.asarray(rows)
        ids = batch.item_ids[rows]
        if ids.max() >= self.n_items or ids.min() < 0:
            raise ValueError("item id outside the generator's catalogue")
        buckets = bucketize(batch.scores[rows], self.buffers_["score_edges"])
        flat, _ = self.features_(batch.user[rows], batch.ctx[rows], ids,
                                 batch.item_feats[rows], buckets, self.params_.dtype)
        return self.encoder_(self.enc_proj_(flat), causal=False)

    def start_embedding(self, user: np.ndarray) -> ag.Tensor:
        """W_p e_user + b_p for raw user features (n, Du)."""
        self._check_fitted()
        e_user = self.features_.user_embedding(np.atleast_2d(user), self.params_.dtype)
        return self.start_(e_user)

    def decode_states(self, memory: ag.Tensor, start: ag.Tensor, prefix: np.ndarray) -> ag.Tensor:
        """Decoder states for steps 1..T+1 given T already-chosen slots (n, T)."""
        n = memory.shape[0]
        t = prefix.shape[1] + 1
        if t > self.list_len:
            raise ValueError(f"decoding past list_len {self.list_len}")
        steps = [start.reshape(n, 1, self.d_model)]
        if prefix.shape[1]:
            steps.append(ag.gather_rows(memory, prefix))
        x = ag.concat(steps, axis=1) if len(steps) > 1 else steps[0]
        pos = ag.broadcast_to(_rows(self.params_["dec_pos.table"], t).reshape(1, t, self.d_pos),
                              (n, t, self.d_pos))
        return self.decoder_(self.dec_proj_(ag.concat([x, pos], axis=-1)), causal=True)

    def sequence_log_probs(self, batch: RequestBatch, rows, sequence: np.ndarray):
        """Teacher-forced log P_theta(. | l_<t) for every step; returns (logp, available)."""
        rows = np.asarray(rows)
        sequence = np.asarray(sequence)
        memory = self.encode_candidates(batch, rows)
        start = self.start_embedding(batch.user[rows])
        h = self.decode_states(memory, start, sequence[:, :-1])
        logits = ag.bmm(h, ag.transpose(memory, (0, 2, 1)))
        avail = availability(sequence, batch.n_candidates)
        return ag.masked_log_softmax(logits, avail), avail

    # training

    def fit(self, X, requests=None, y=None):
        """Train by teacher forcing.

        X: SupervisionRecords (with ``requests`` holding their requests) or,
        for ``ablation="exposure_only"``, ExposureRecords.
        """
        X = list(X)
        if not X:
            raise ValueError("cannot fit on an empty training set")
        if self.ablation == "exposure_only":
            if not isinstance(X[0], ExposureRecord):
                raise ValueError("exposure_only trains on ExposureRecords, not mined supervision")
            targets = DistillationTargets.from_exposures(X)
        else:
            if isinstance(X[0], ExposureRecord):
                raise ValueError(f"ablation {self.ablation!r} needs mined SupervisionRecords")
            if requests is None:
                raise ValueError("requests are needed to featurise supervision records")
            targets = DistillationTargets.from_supervision(X, requests)
        self.initialize(targets.batch)
        alpha, weight, use_hard = self._loss_switches(targets)
        dt = self.params_.dtype
        soft = targets.soft.astype(dt)

        def batch_loss(idx):
            logp, avail = self.sequence_log_probs(targets.batch, targets.rows[idx],
                                                  targets.sequence[idx])
            return gen_loss(logp, avail, targets.sequence[idx], soft[idx], weight[idx],
                            alpha, use_hard)

        self.history_ = self._run_epochs(len(targets.rows), batch_loss)
        self.report_ = {
            "ablation": self.ablation,
            "alpha": alpha,
            "use_hard": use_hard,
            "n_supervision_records": len(X) if targets.source == "supervision" else 0,
            "n_exposure_records": len(X) if targets.source == "exposures" else 0,
            "history": self.history_,
        }
        return self

    def _loss_switches(self, targets: DistillationTargets):
        alpha, weight, use_hard = self.alpha, targets.weight, True
        if self.ablation == "no_soft":
            alpha = 0.0
        elif self.ablation == "no_weight":
            weight = np.ones_like(weight)
        elif self.ablation == "no_hard":
            use_hard = False
        elif self.ablation == "exposure_only":
            alpha = 0.0
        return alpha, weight, use_hard

    # inference

    def decode(self, batch: RequestBatch, rows=None, chunk: int = 2048):
        """Greedy decoding. Returns (slots (n, L), per-step distributions (n, L, N)).

        Ties in the argmax go to the smallest item id, so the output does not
        depend on candidate order.
        """
        self._check_fitted()
        if self.list_len > batch.n_candidates:
            raise ValueError(f"list_len {self.list_len} > candidate count {batch.n_candidates}")
        rows = np.arange(len(batch)) if rows is None else np.asarray(rows)
        out_sel, out_p = [], []
        for s in range(0, len(rows), chunk):
            sel, p = self._decode_chunk(batch, rows[s:s + chunk])
            out_sel.append(sel)
            out_p.append(p)
        return np.concatenate(out_sel), np.concatenate(out_p)

    def _decode_chunk(self, batch, rows):
        n, big_n = len(rows), batch.n_candidates
        memory = self.encode_candidates(batch, rows)
        start = self.start_embedding(batch.user[rows])
        ids = batch.item_ids[rows]
        selected = np.zeros((n, 0), dtype=np.int64)
        avail = np.ones((n, big_n), dtype=bool)
        dists = np.zeros((n, self.list_len, big_n))
        r = np.arange(n)
        for t in range(self.list_len):
            h = self.decode_states(memory, start, selected).data[:, -1]
            p = pointer_probs(h, memory.data, avail)
            dists[:, t] = p
            best = p.max(axis=1, keepdims=True)
            tied = (p == best) & avail
            choice = np.argmin(np.where(tied, ids, np.iinfo(np.int64).max), axis=1)
            selected = np.concatenate([selected, choice[:, None]], axis=1)
            avail[r, choice] = False
        return selected, dists

    def predict(self, requests) -> list[tuple[int, ...]]:
        requests = list(requests)
        batch = RequestBatch.from_requests(requests)
        slots, _ = self.decode(batch)
        return [tuple(int(v) for v in batch.item_ids[i, slots[i]]) for i in range(len(requests))]

