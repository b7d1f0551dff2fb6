"""Offline dense-supervision mining with an evaluator-guided beam search.

For every request the beam search keeps the ``beam_size`` prefixes with the
highest estimated value, grows them one item at a time until ``list_len``,
and returns the surviving lists. Each mined list yields a hard target per
step (the item it chose), a soft target per step (softmax of the estimated
values of every remaining candidate after the same prefix) and a list weight
(softmax of the list values at temperature ``tau_w``, times the beam size).
"""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .data.types import RequestBatch, RerankRequest

logger = logging.getLogger(__name__)

SUPERVISION_FORMAT = "lookahead-rerank/supervision"


@dataclass(frozen=True)
class SupervisionRecord:
    request_id: int
    sequence: tuple[int, ...]
    soft: tuple[dict, ...]          # per step: {item id: q_t(item)} over remaining items
    value: float
    weight: float
    effective_weight: float

    @property
    def hard_labels(self) -> tuple[int, ...]:
        return self.sequence

    def to_json(self) -> dict:
        return {
            "request_id": self.request_id,
            "sequence": list(self.sequence),
            "value": self.value,
            "weight": self.weight,
            "effective_weight": self.effective_weight,
            "steps": [{"hard_id": h, "soft": {str(k): v for k, v in q.items()}}
                      for h, q in zip(self.sequence, self.soft)],
        }

    @classmethod
    def from_json(cls, obj: dict, line: int = 0) -> "SupervisionRecord":
        try:
            steps = obj["steps"]
            seq = tuple(int(v) for v in obj["sequence"])
            if [s["hard_id"] for s in steps] != list(seq):
                raise ValueError("hard_id does not match sequence")
            soft = tuple({int(k): float(v) for k, v in s["soft"].items()} for s in steps)
            return cls(int(obj["request_id"]), seq, soft, float(obj["value"]),
                       float(obj["weight"]), float(obj["effective_weight"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"supervision line {line}: bad record ({exc})") from None


def stable_softmax(x, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def sequence_weights(values, tau_w: float, beam_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Softmax of list values at temperature ``tau_w``; effective weights sum to ``beam_size``."""
    if tau_w <= 0:
        raise ValueError("tau_w must be > 0")
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("need at least one sequence")
    w = stable_softmax(values, tau_w)
    return w, beam_size * w


def _rank_key(value: float, seq_ids: Sequence[int]):
    # V-hat descending, then newest item id, then the prefix ids
    return (-value, seq_ids[-1], tuple(seq_ids[:-1]))


def _candidate_order(batch: RequestBatch, row: int) -> np.ndarray:
    """Slots by upstream score descending, item id ascending; used for top-k pre-truncation."""
    return np.lexsort((batch.item_ids[row], -batch.scores[row]))


def _search(evaluator, batch: RequestBatch, rows: Sequence[int], beam_size: int, topk: int,
            list_len: int):
    """Beam search for several requests at once.

    All expansions of a step, across every request in ``rows``, are scored
    in a single evaluator call. Returns per request the final prefixes
    (tuples of slots), their values and the expansion-score cache
    {prefix: array over slots, NaN where unscored}.
    """
    if beam_size * topk == 0:
        raise ValueError("beam_size * topk must be positive")
    n = batch.n_candidates
    ids = batch.item_ids
    order = [_candidate_order(batch, r) for r in rows]
    beams: list[list[tuple]] = [[()] for _ in rows]
    values: list[list[float]] = [[0.0] for _ in rows]
    cache: list[dict] = [{} for _ in rows]
    for _step in range(list_len):
        exp_rows, exp_seqs, owner = [], [], []
        for i, r in enumerate(rows):
            for prefix in beams[i]:
                used = set(prefix)
                picks = [int(s) for s in order[i] if s not in used][:topk]
                for s in picks:
                    exp_rows.append(r)
                    exp_seqs.append(prefix + (s,))
                    owner.append(i)
        scored = evaluator.prefix_values(batch, np.array(exp_rows), np.array(exp_seqs))[:, -1]
        grouped = defaultdict(list)
        for seq, v, i in zip(exp_seqs, scored, owner):
            row_cache = cache[i].setdefault(seq[:-1], np.full(n, np.nan))
            row_cache[seq[-1]] = v
            grouped[i].append((seq, float(v)))
        for i, r in enumerate(rows):
            ranked = sorted(grouped[i], key=lambda sv: _rank_key(sv[1], ids[r, list(sv[0])]))
            beams[i] = [s for s, _ in ranked[:beam_size]]
            values[i] = [v for _, v in ranked[:beam_size]]
    return beams, values, cache


def beam_search_mine(evaluator, request: RerankRequest, beam_size: int, topk: int | None = None,
                     list_len: int | None = None):
    """Mine up to ``beam_size`` lists for one request.

    Returns [(item ids, estimated value)] sorted by value descending.
    """
    batch = RequestBatch.from_requests([request])
    list_len = evaluator.max_len if list_len is None else list_len
    topk = batch.n_candidates if topk is None else topk
    if not 1 <= list_len <= batch.n_candidates:
        raise ValueError("need 1 <= list_len <= number of candidates")
    beams, values, _ = _search(evaluator, batch, [0], beam_size, topk, list_len)
    return [(tuple(int(v) for v in batch.item_ids[0, list(s)]), v)
            for s, v in zip(beams[0], values[0])]


def _soft_from_scores(scores: np.ndarray, used: set, ids: np.ndarray) -> dict:
    avail = [s for s in range(len(scores)) if s not in used]
    q = stable_softmax(scores[avail])
    return {int(ids[s]): float(p) for s, p in zip(avail, q)}


def soft_labels(evaluator, request: RerankRequest, prefix: Sequence[int]) -> dict:
    """q_t over the candidates not yet in ``prefix``: softmax of V-hat([prefix; v])."""
    batch = RequestBatch.from_requests([request])
    used = request.positions(prefix)
    n = batch.n_candidates
    if len(used) >= n:
        raise ValueError("prefix exhausts the candidate set")
    if len(used) >= evaluator.max_len:
        raise ValueError(f"prefix length {len(used)} leaves no step within max_len")
    avail = [s for s in range(n) if s not in set(used)]
    seqs = np.array([used + [s] for s in avail])
    scores = np.full(n, np.nan)
    scores[avail] = evaluator.prefix_values(batch, np.zeros(len(avail), dtype=int), seqs)[:, -1]
    return _soft_from_scores(scores, set(used), batch.item_ids[0])


class LookaheadMiner(TransformerMixin, BaseEstimator):
    """Turns requests into weighted supervision records using a frozen evaluator.

    ``transform(requests)`` returns ``beam_size`` records per request, ordered
    by request id then by estimated value; ``report_`` summarises the run.
    """

    def __init__(self, evaluator=None, beam_size=4, topk=None, list_len=None, tau_w=0.5,
                 chunk_size=64):
        self.evaluator = evaluator
        self.beam_size = beam_size
        self.topk = topk
        self.list_len = list_len
        self.tau_w = tau_w
        self.chunk_size = chunk_size

    def fit(self, X=None, y=None):
        if self.evaluator is None:
            raise ValueError("LookaheadMiner needs a fitted evaluator")
        self.evaluator._check_fitted()
        return self

    def transform(self, requests, env=None, exposures=None):
        self.fit()
        ev = self.evaluator
        list_len = ev.max_len if self.list_len is None else self.list_len
        requests = sorted(requests, key=lambda r: r.request_id)
        if not requests:
            raise ValueError("no requests to mine")
        failed, ok = [], []
        for r in requests:
            if len(r.candidates) < list_len or any(not 0 <= c.id < ev.n_items
                                                   for c in r.candidates):
                logger.warning("skipping request %s: cannot be mined", r.request_id)
                failed.append(r.request_id)
            else:
                ok.append(r)
        batch = RequestBatch.from_requests(ok)
        n = batch.n_candidates
        topk = n if self.topk is None else self.topk
        if not 1 <= topk <= n:
            raise ValueError(f"topk must be in [1, {n}]")

        records: list[SupervisionRecord] = []
        short, top_values = [], []
        top_positions = np.zeros((len(ok), list_len), dtype=np.int64)
        for start in range(0, len(ok), self.chunk_size):
            rows = list(range(start, min(start + self.chunk_size, len(ok))))
            beams, values, cache = _search(ev, batch, rows, self.beam_size, topk, list_len)
            self._fill_missing(batch, rows, beams, cache)
            for i, r in enumerate(rows):
                if len(beams[i]) < self.beam_size:
                    short.append(int(batch.request_ids[r]))
                top_positions[r] = beams[i][0]
                top_values.append(values[i][0])
                w, eff = sequence_weights(values[i], self.tau_w, self.beam_size)
                ids = batch.item_ids[r]
                for b, seq in enumerate(beams[i]):
                    soft = tuple(_soft_from_scores(cache[i][seq[:t]], set(seq[:t]), ids)
                                 for t in range(list_len))
                    records.append(SupervisionRecord(
                        int(batch.request_ids[r]), tuple(int(v) for v in ids[list(seq)]), soft,
                        float(values[i][b]), float(w[b]), float(eff[b])))

        report = {
            "n_requests": len(requests),
            "n_records": len(records),
            "failed_request_ids": failed,
            "short_beam_request_ids": short,
            "beam_size": self.beam_size,
            "topk": topk,
            "tau_w": self.tau_w,
            "mean_top_value_estimate": float(np.mean(top_values)) if top_values else None,
        }
        if env is not None:
            mined = env.list_values(batch, np.arange(len(ok)), top_positions)
            report["mean_env_value_mined_top"] = float(mined.mean())
            if exposures:
                eb = RequestBatch.from_requests(e.request for e in exposures)
                epos = np.array([e.request.positions(e.exposed) for e in exposures])
                logged = env.list_values(eb, np.arange(len(exposures)), epos)
                report["mean_env_value_logged"] = float(logged.mean())
                report["exploration_gain"] = report["mean_env_value_mined_top"] - \
                    report["mean_env_value_logged"]
        self.report_ = report
        return records

    def _fill_missing(self, batch, rows, beams, cache):
        """Score every remaining candidate after each mined prefix that top-k skipped."""
        n = batch.n_candidates
        need_rows, need_seqs, where, seen = [], [], [], set()
        for i, r in enumerate(rows):
            for seq in beams[i]:
                for t in range(len(seq)):
                    prefix = seq[:t]
                    scores = cache[i].setdefault(prefix, np.full(n, np.nan))
                    for s in range(n):
                        key = (i, prefix, s)
                        if s not in prefix and np.isnan(scores[s]) and key not in seen:
                            seen.add(key)
                            need_rows.append(r)
                            need_seqs.append(prefix + (s,))
                            where.append((i, prefix, s))
        if not need_seqs:
            return
        # group by length: prefix_values needs rectangular input
        by_len = defaultdict(list)
        for j, seq in enumerate(need_seqs):
            by_len[len(seq)].append(j)
        for idx in by_len.values():
            vals = self.evaluator.prefix_values(batch, np.array([need_rows[j] for j in idx]),
                                                np.array([need_seqs[j] for j in idx]))[:, -1]
            for j, v in zip(idx, vals):
                i, prefix, s = where[j]
                cache[i][prefix][s] = v


def build_supervision_dataset(evaluator, requests, beam_size=4, topk=None, tau_w=0.5,
                              env=None, exposures=None):
    """Mine every request; returns (records, report)."""
    miner = LookaheadMiner(evaluator, beam_size=beam_size, topk=topk, tau_w=tau_w)
    records = miner.transform(requests, env=env, exposures=exposures)
    return records, miner.report_


def reweight(records, tau_w: float, beam_size: int | None = None) -> list[SupervisionRecord]:
    """Recompute sequence weights of mined records for another temperature.

    Beams and soft labels do not depend on ``tau_w``, so a cached mining run
    can serve a tau_w sweep. ``beam_size`` defaults to the per-request count.
    """
    by_request = defaultdict(list)
    for rec in records:
        by_request[rec.request_id].append(rec)
    out = []
    for rid in sorted(by_request):
        group = by_request[rid]
        b = len(group) if beam_size is None else beam_size
        w, eff = sequence_weights([r.value for r in group], tau_w, b)
        out.extend(replace(r, weight=float(wi), effective_weight=float(ei))
                   for r, wi, ei in zip(group, w, eff))
    return out


def save_supervision(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": SUPERVISION_FORMAT, "version": 1},
                            separators=(",", ":")) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")


def load_supervision(path) -> list[SupervisionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != SUPERVISION_FORMAT:
            raise ValueError(f"{path}: not a supervision file")
        for line_no, text in enumerate(fh, start=2):
            if text.strip():
                try:
                    obj = json.loads(text)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"supervision line {line_no}: {exc.msg}") from None
                out.append(SupervisionRecord.from_json(obj, line_no))
    return out
