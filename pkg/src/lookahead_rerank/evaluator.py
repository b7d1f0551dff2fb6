"""Causal cumulative-regression list value model.

For a list prefix l_{1:t} the model emits one logit per click threshold k and
reads P(V >= k | l_{1:t}) = sigmoid(O[t, k]) for k <= t. The expected value
is the sum of those probabilities. Causal attention makes the row at step t
a function of the first t items only, so one forward pass over a length-T
sequence scores all T prefixes at once.
"""
from __future__ import annotations

import numpy as np

from ._base import NeuralEstimator
from ._features import FeatureProcessor, bucketize, fit_score_edges
from .data.types import ExposureRecord, RequestBatch
from .numerics import autograd as ag
from .numerics.layers import Linear, TransformerStack


def build_label_matrix(clicks, max_len: int | None = None) -> np.ndarray:
    """Unary threshold code of the cumulative clicks: Y[t, k] = 1 iff y_t >= k+1."""
    clicks = np.asarray(clicks)
    if clicks.size and not np.isin(clicks, (0, 1)).all():
        raise ValueError(f"clicks must be 0/1, got {clicks.tolist()}")
    max_len = clicks.shape[-1] if max_len is None else max_len
    if clicks.shape[-1] != max_len:
        raise ValueError(f"expected {max_len} click labels, got {clicks.shape[-1]}")
    y = np.cumsum(clicks, axis=-1)
    k = np.arange(1, max_len + 1)
    return (y[..., :, None] >= k).astype(np.float64)


def triangular_mask(max_len: int) -> np.ndarray:
    return np.tril(np.ones((max_len, max_len), dtype=bool))


def eval_loss(logits: ag.Tensor, labels: np.ndarray) -> ag.Tensor:
    """Ordered BCE over the lower triangle k <= t, divided by L, averaged over lists.

    ``logits`` is (L, L) or (n, L, L); entries above the diagonal are ignored.
    """
    logits = ag.as_tensor(logits)
    max_len = logits.shape[-1]
    if logits.shape[-2] != max_len or np.shape(labels) != logits.shape:
        raise ag.ShapeError("eval_loss", logits.shape, np.shape(labels))
    mask = triangular_mask(max_len).astype(logits.dtype)
    per = ag.bce_with_logits(logits, np.where(mask, labels, 0.0)) * mask
    n = int(np.prod(logits.shape[:-2], dtype=np.int64))
    return ag.sum_(per) * (1.0 / (max_len * n))


def cumulative_probs(logits: np.ndarray) -> np.ndarray:
    """sigmoid of the logits with every k > t entry set to 0."""
    probs = ag._sigmoid(np.array(logits, dtype=np.float64))
    return probs * np.tril(np.ones(probs.shape[-2:]))


def expected_value(probs, t: int | None = None) -> float | np.ndarray:
    """Sum of P(V >= k) over thresholds k = 1..t."""
    probs = np.asarray(probs, dtype=np.float64)
    if t is None:
        t = probs.shape[-1]
    if t < 1:
        raise ValueError("t must be >= 1")
    return probs[..., :t].sum(axis=-1)


def monotone_violation_rate(probs: np.ndarray) -> float:
    """Fraction of prefix rows whose threshold probabilities increase somewhere in k."""
    probs = np.asarray(probs)
    t = probs.shape[-1]
    bad = []
    for step in range(1, t):
        row = probs[..., step, : step + 1]
        bad.append((np.diff(row, axis=-1) > 0).any(axis=-1))
    return float(np.mean(bad)) if bad else 0.0


class LookaheadEvaluator(NeuralEstimator):
    """Causal transformer estimating the expected cumulative clicks of list prefixes.

    Fit on logged exposures (``ExposureRecord`` lists); score any candidate
    ordering with :meth:`prefix_values` or :meth:`predict`.
    """

    _kind = "evaluator"

    def __init__(self, n_items=200, max_len=6, embed_dim=16, d_model=32, d_pos=8,
                 n_layers=6, n_heads=2, ff_dim=64, n_score_buckets=16,
                 learning_rate=5e-4, lr_schedule="constant", weight_decay=0.0, batch_size=1024, n_epochs=10, random_state=0,
                 dtype="float32"):
        self.n_items = n_items
        self.max_len = max_len
        self.embed_dim = embed_dim
        self.d_model = d_model
        self.d_pos = d_pos
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ff_dim = ff_dim
        self.n_score_buckets = n_score_buckets
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
        ps.init_uniform("pos.table", (self.max_len, self.d_pos), self.d_pos, rng)
        self.input_proj_ = Linear(ps, "input_proj", self.features_.out_dim + self.d_pos,
                                  self.d_model, rng)
        self.encoder_ = TransformerStack(ps, "encoder", self.n_layers, self.d_model,
                                         self.n_heads, self.ff_dim, rng)
        self.head1_ = Linear(ps, "head.0", self.d_model, self.d_model, rng)
        self.head2_ = Linear(ps, "head.1", self.d_model, self.max_len, rng)

    # forward

    def initialize(self, batch: RequestBatch) -> "LookaheadEvaluator":
        """Create parameters from input dimensions without training."""
        self._init_params({"user_dim": batch.user.shape[1], "ctx_dim": batch.ctx.shape[1],
                           "item_dim": batch.item_feats.shape[2]})
        self.buffers_ = {"score_edges": fit_score_edges(batch.scores, self.n_score_buckets)}
        self.history_ = []
        return self

    def encode_sequence(self, batch: RequestBatch, rows, positions) -> ag.Tensor:
        """Hidden states H of shape (n, T, d_model) for lists of candidate slots."""
        self._check_fitted()
        rows = np.asarray(rows)
        positions = np.asarray(positions)
        if positions.ndim != 2 or positions.shape[1] == 0:
            raise ValueError("need at least one item per sequence to encode")
        n, t = positions.shape
        if t > self.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {self.max_len}")
        dtype = self.params_.dtype
        r2 = rows[:, None]
        item_ids = batch.item_ids[r2, positions]
        if item_ids.max() >= self.n_items or item_ids.min() < 0:
            raise ValueError("item id outside the evaluator's catalogue")
        buckets = bucketize(batch.scores[r2, positions], self.buffers_["score_edges"])
        flat, _ = self.features_(batch.user[rows], batch.ctx[rows], item_ids,
                                 batch.item_feats[r2, positions], buckets, dtype)
        pos = ag.broadcast_to(ag.reshape(_rows(self.params_["pos.table"], t), (1, t, self.d_pos)),
                              (n, t, self.d_pos))
        x = self.input_proj_(ag.concat([flat, pos], axis=-1))
        return self.encoder_(x, causal=True)

    def cumulative_head(self, hidden: ag.Tensor) -> ag.Tensor:
        """Threshold logits O of shape (n, T, max_len); only k <= t is meaningful."""
        return self.head2_(ag.gelu(self.head1_(hidden)))

    def logits(self, batch, rows, positions) -> ag.Tensor:
        return self.cumulative_head(self.encode_sequence(batch, rows, positions))

    def value_distribution(self, batch, rows, positions, chunk: int = 4096) -> np.ndarray:
        """P(V >= k | l_{1:t}) as (n, T, T), zero above the diagonal."""
        positions = np.asarray(positions)
        t = positions.shape[1]
        out = []
        for s in range(0, len(positions), chunk):
            o = self.logits(batch, np.asarray(rows)[s:s + chunk], positions[s:s + chunk]).data
            out.append(cumulative_probs(o[:, :, :t]))
        return np.concatenate(out) if out else np.zeros((0, t, t))

    def prefix_values(self, batch, rows, positions, chunk: int = 4096) -> np.ndarray:
        """Expected cumulative value after every prefix length, shape (n, T)."""
        return self.value_distribution(batch, rows, positions, chunk).sum(axis=-1)

    def predict(self, requests, sequences) -> np.ndarray:
        """Expected value of each full item-id sequence for its request."""
        requests = list(requests)
        batch = RequestBatch.from_requests(requests)
        rows = np.arange(len(requests))
        positions = np.array([r.positions(s) for r, s in zip(requests, sequences)])
        return self.prefix_values(batch, rows, positions)[:, -1]

    # training

    def _arrays(self, records):
        records = list(records)
        batch = RequestBatch.from_requests(r.request for r in records)
        positions = np.array([r.request.positions(r.exposed) for r in records])
        if positions.shape[1] != self.max_len:
            raise ValueError(f"exposures have length {positions.shape[1]}, "
                             f"evaluator max_len is {self.max_len}")
        labels = build_label_matrix(np.array([r.clicks for r in records]), self.max_len)
        return batch, positions, labels

    def fit(self, records, y=None, validation=None, env=None):
        """Train on exposure records with the ordered BCE objective.

        ``validation``: optional held-out records; with ``env`` their exact
        list values are the ground truth for the per-epoch metrics.
        """
        records = list(records)
        if not records:
            raise ValueError("cannot fit on an empty training set")
        batch, positions, labels = self._arrays(records)
        self.initialize(batch)
        rows_all = np.arange(len(records))
        labels = labels.astype(self.params_.dtype)

        def batch_loss(idx):
            o = self.logits(batch, rows_all[idx], positions[idx])
            return eval_loss(o, labels[idx])

        on_epoch_end = None
        if validation:
            def on_epoch_end(_epoch):
                return self.score_records(validation, env)

        self.history_ = self._run_epochs(len(records), batch_loss, on_epoch_end)
        return self

    def score_records(self, records, env=None) -> dict:
        """R-AUC / PCOC / RMSE of full-list predictions on held-out records.

        Truth is the exact expected clicks under ``env`` when given, the
        observed click count otherwise.
        """
        from .metrics import pcoc, r_auc, rmse

        records = list(records)
        batch = RequestBatch.from_requests(r.request for r in records)
        positions = np.array([r.request.positions(r.exposed) for r in records])
        rows = np.arange(len(records))
        dist = self.value_distribution(batch, rows, positions)
        pred = dist[:, -1].sum(axis=-1)
        if env is not None:
            truth = env.list_values(batch, rows, positions)
        else:
            truth = np.array([sum(r.clicks) for r in records], dtype=np.float64)
        return {"r_auc": r_auc(truth, pred), "pcoc": pcoc(truth, pred),
                "rmse": rmse(truth, pred), "non_monotone_rows": monotone_violation_rate(dist),
                "n": len(records)}


def _rows(table: ag.Tensor, t: int) -> ag.Tensor:
    out = table.data[:t]

    def bw(g):
        full = np.zeros_like(table.data)
        full[:t] = g
        ag._accumulate(table, full)

    return ag.Tensor(out, (table,), bw, "slice")
