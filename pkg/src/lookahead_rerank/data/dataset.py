"""Exposure-log generation, JSON-lines persistence and the leave-one-out split."""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

from .env import EnvSpec
from .types import ExposureRecord, Item, RequestBatch, RerankRequest

logger = logging.getLogger(__name__)

POLICIES = ("random", "score", "mixed")
DATASET_FORMAT = "lookahead-rerank/exposures"
DATASET_VERSION = 1
RECORD_FIELDS = ("request_id", "user_id", "user_feats", "ctx_feats", "candidates",
                 "exposed", "clicks")
CANDIDATE_FIELDS = ("id", "feats", "score")


class DatasetFormatError(ValueError):
    def __init__(self, line: int, field: str, message: str):
        self.line, self.field = line, field
        super().__init__(f"line {line} (record {line - 2}), field {field!r}: {message}")


def synth_generate(env: EnvSpec, n_users: int, sessions_per_user: int, *,
                   n_candidates: int = 12, list_len: int = 6, policy: str = "mixed",
                   epsilon: float = 0.2, seed: int = 0) -> list[ExposureRecord]:
    """Sample logged exposures and Bernoulli clicks from ``env``.

    ``policy`` picks the exposed list: "score" shows the top ``list_len``
    candidates by upstream score, "random" a uniform random ordered
    selection, and "mixed" the score order except that with probability
    ``epsilon`` it shows a random list instead.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown logging policy {policy!r}; expected one of {POLICIES}")
    if not 1 <= list_len <= n_candidates <= env.params.n_items:
        raise ValueError("need 1 <= list_len <= n_candidates <= n_items")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    p = env.params
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    n_req = n_users * sessions_per_user
    if n_req == 0:
        return []
    user_feats = np.round(rng.standard_normal((n_users, p.user_dim)), p.decimals)
    user_of = np.repeat(np.arange(n_users), sessions_per_user)
    ctx = np.round(rng.standard_normal((n_req, p.ctx_dim)), p.decimals)
    ids = np.argsort(rng.random((n_req, p.n_items)), axis=1)[:, :n_candidates]
    batch = RequestBatch(np.arange(n_req), user_feats[user_of], ctx, ids,
                         env.item_feats[ids], np.zeros(ids.shape))
    scores = env.sample_scores(batch, rng)
    batch.scores = scores

    by_score = np.argsort(-scores, axis=1, kind="stable")[:, :list_len]
    shuffled = np.argsort(rng.random((n_req, n_candidates)), axis=1)[:, :list_len]
    if policy == "score":
        use_random = np.zeros(n_req, dtype=bool)
    elif policy == "random":
        use_random = np.ones(n_req, dtype=bool)
    else:
        use_random = rng.random(n_req) < epsilon
    exposed = np.where(use_random[:, None], shuffled, by_score)
    probs = env.click_probs(batch, np.arange(n_req), exposed)
    clicks = (rng.random(probs.shape) < probs).astype(int)

    records = []
    for r in range(n_req):
        cands = tuple(Item(int(ids[r, j]), tuple(float(v) for v in batch.item_feats[r, j]),
                           float(scores[r, j])) for j in range(n_candidates))
        req = RerankRequest(int(r), int(user_of[r]), tuple(float(v) for v in batch.user[r]),
                            tuple(float(v) for v in ctx[r]), cands)
        records.append(ExposureRecord(req, tuple(int(ids[r, j]) for j in exposed[r]),
                                      tuple(int(c) for c in clicks[r])))
    return records


def split_leave_one_out(dataset, return_report: bool = False):
    """Last session of each user goes to test, the rest to train.

    Sessions are ordered by request id. Users with a single session stay in
    train and are counted in the report.
    """
    by_user: dict[int, list[ExposureRecord]] = defaultdict(list)
    for rec in dataset:
        by_user[rec.request.user_id].append(rec)
    test_ids = set()
    single = 0
    for recs in by_user.values():
        if len(recs) < 2:
            single += 1
            continue
        test_ids.add(max(r.request.request_id for r in recs))
    train = [r for r in dataset if r.request.request_id not in test_ids]
    test = [r for r in dataset if r.request.request_id in test_ids]
    if single:
        logger.info("leave-one-out: %d single-session users kept in train only", single)
    if return_report:
        return train, test, {"n_train": len(train), "n_test": len(test),
                             "single_session_users": single}
    return train, test


# persistence


def _record_to_json(rec: ExposureRecord) -> dict:
    req = rec.request
    return {
        "request_id": req.request_id,
        "user_id": req.user_id,
        "user_feats": list(req.user_feats),
        "ctx_feats": list(req.ctx_feats),
        "candidates": [{"id": c.id, "feats": list(c.feats), "score": c.score}
                       for c in req.candidates],
        "exposed": list(rec.exposed),
        "clicks": list(rec.clicks),
    }


def request_to_json(req: RerankRequest) -> dict:
    d = _record_to_json(ExposureRecord(req, (), ()))
    del d["exposed"], d["clicks"]
    return d


def save_dataset(dataset, path) -> None:
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION,
              "fields": list(RECORD_FIELDS), "candidate_fields": list(CANDIDATE_FIELDS)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for rec in dataset:
            fh.write(json.dumps(_record_to_json(rec), separators=(",", ":")) + "\n")


def _floats(v, line, name):
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) for x in v):
        raise DatasetFormatError(line, name, "expected a list of numbers")
    return tuple(float(x) for x in v)


def _ints(v, line, name):
    if not isinstance(v, list) or not all(isinstance(x, int) for x in v):
        raise DatasetFormatError(line, name, "expected a list of integers")
    return tuple(v)


def parse_request(obj, line: int, require=RECORD_FIELDS[:5]) -> RerankRequest:
    if not isinstance(obj, dict):
        raise DatasetFormatError(line, "<record>", "expected an object")
    for name in require:
        if name not in obj:
            raise DatasetFormatError(line, name, "missing field")
    cands = []
    if not isinstance(obj["candidates"], list):
        raise DatasetFormatError(line, "candidates", "expected a list")
    for j, c in enumerate(obj["candidates"]):
        for name in CANDIDATE_FIELDS:
            if not isinstance(c, dict) or name not in c:
                raise DatasetFormatError(line, f"candidates[{j}].{name}", "missing field")
        cands.append(Item(int(c["id"]), _floats(c["feats"], line, f"candidates[{j}].feats"),
                          float(c["score"])))
    try:
        return RerankRequest(int(obj["request_id"]), int(obj["user_id"]),
                             _floats(obj["user_feats"], line, "user_feats"),
                             _floats(obj["ctx_feats"], line, "ctx_feats"), tuple(cands))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError(line, "candidates", str(exc)) from None


def _read_header(fh, path, expected_format):
    first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError:
        raise DatasetFormatError(1, "<header>", f"{path}: unreadable header") from None
    if header.get("format") != expected_format:
        raise DatasetFormatError(1, "format", f"expected {expected_format!r}")
    return header


def load_dataset(path) -> list[ExposureRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        _read_header(fh, path, DATASET_FORMAT)
        for line_no, text in enumerate(fh, start=2):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(line_no, "<record>", f"malformed JSON ({exc.msg})") from None
            req = parse_request(obj, line_no)
            for name in ("exposed", "clicks"):
                if name not in obj:
                    raise DatasetFormatError(line_no, name, "missing field")
            exposed = _ints(obj["exposed"], line_no, "exposed")
            clicks = _ints(obj["clicks"], line_no, "clicks")
            try:
                out.append(ExposureRecord(req, exposed, clicks))
            except ValueError as exc:
                raise DatasetFormatError(line_no, "exposed/clicks", str(exc)) from None
    return out


def save_requests(requests, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": "lookahead-rerank/requests", "version": 1},
                            separators=(",", ":")) + "\n")
        for req in requests:
            fh.write(json.dumps(request_to_json(req), separators=(",", ":")) + "\n")


def load_requests(path) -> list[RerankRequest]:
    """Read a request file, or the requests inside an exposure dataset file."""
    out = []
    with open(path, encoding="utf-8") as fh:
        first = json.loads(fh.readline())
        if first.get("format") not in ("lookahead-rerank/requests", DATASET_FORMAT):
            raise DatasetFormatError(1, "format", "not a request or dataset file")
        for line_no, text in enumerate(fh, start=2):
            if text.strip():
                out.append(parse_request(json.loads(text), line_no))
    return out
