"""Generator and evaluator metrics, and the exact permutation oracle."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import permutations
from typing import Callable, Sequence

import numpy as np

from .data.env import EnvSpec
from .data.types import RequestBatch, RerankRequest

DEFAULT_KS = (1, 3, 10)


@dataclass
class ComparisonSet:
    request_id: int
    positions: np.ndarray      # (S, L) candidate slots
    values: np.ndarray         # (S,) ground-truth env values
    seed: int

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class MetricReport:
    hr: dict = field(default_factory=dict)            # {"HR@1%": ...}
    hr_half_width: dict = field(default_factory=dict)
    n_requests: int = 0
    n_samples: int = 0
    r_auc: float | None = None
    pcoc: float | None = None
    rmse: float | None = None
    mean_value: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def sample_comparison_set(batch: RequestBatch, row: int, env: EnvSpec, n_samples: int = 10_000,
                          seed: int = 0, list_len: int = 6) -> ComparisonSet:
    """Uniform random length-L orderings of one request's candidates, valued by ``env``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rid = int(batch.request_ids[row])
    rng = np.random.default_rng(np.random.SeedSequence([seed, rid]))
    pos = np.argsort(rng.random((n_samples, batch.n_candidates)), axis=1)[:, :list_len]
    values = env.list_values(batch, np.full(n_samples, row), pos)
    return ComparisonSet(rid, pos, values, seed)


def rank_in(value: float, comparison: ComparisonSet) -> int:
    """Number of comparison lists with a strictly higher value."""
    if len(comparison) == 0:
        raise ValueError("empty comparison set")
    return int(np.count_nonzero(comparison.values > value))


def hr_hit(rank: int, n_samples: int, k_percent: float) -> bool:
    if n_samples <= 0:
        raise ValueError("empty comparison set")
    # rank/S < K/100, compared exactly in integers
    return rank * 100 < k_percent * n_samples


def hr_at_k(value: float, comparison: ComparisonSet, k_percent: float) -> bool:
    return hr_hit(rank_in(value, comparison), len(comparison), k_percent)


def evaluate_lists(env: EnvSpec, batch: RequestBatch, positions: np.ndarray,
                   n_samples: int = 10_000, seed: int = 0, ks=DEFAULT_KS) -> MetricReport:
    """HR@K% of one generated list per request (positions: (R, L) slots)."""
    positions = np.asarray(positions)
    r, list_len = positions.shape
    values = env.list_values(batch, np.arange(r), positions)
    point = env.point_logits(batch)
    hits = {k: 0 for k in ks}
    for row in range(r):
        rid = int(batch.request_ids[row])
        rng = np.random.default_rng(np.random.SeedSequence([seed, rid]))
        pos = np.argsort(rng.random((n_samples, batch.n_candidates)), axis=1)[:, :list_len]
        comp = env.list_values(batch, np.full(n_samples, row), pos, point)
        rank = int(np.count_nonzero(comp > values[row]))
        for k in ks:
            hits[k] += hr_hit(rank, n_samples, k)
    report = MetricReport(n_requests=r, n_samples=n_samples, mean_value=float(values.mean()))
    for k in ks:
        p = hits[k] / r
        report.hr[f"HR@{k}%"] = p
        report.hr_half_width[f"HR@{k}%"] = 1.96 * math.sqrt(max(p * (1 - p), 1e-12) / r)
    return report


def r_auc(y, y_hat) -> float | None:
    """Share of strictly ordered truth pairs whose predictions are strictly ordered the same way.

    Returns None when all truths are equal. O(n log n) via ranks.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError("y and y_hat must have the same shape")
    n = len(y)
    # sort by truth; count pairs with y_i > y_j and y_hat_i > y_hat_j
    order = np.lexsort((y_hat, y))
    ys, ps = y[order], y_hat[order]
    _, y_group = np.unique(ys, return_inverse=True)
    total = n * (n - 1) // 2 - int(sum(c * (c - 1) // 2 for c in np.bincount(y_group)))
    if total == 0:
        return None
    # for each element, count predictions strictly lower among elements with strictly lower truth
    p_rank = np.unique(ps, return_inverse=True)[1]
    tree = np.zeros(p_rank.max() + 2, dtype=np.int64)
    concordant = 0
    start = 0
    while start < n:
        stop = start
        while stop < n and y_group[stop] == y_group[start]:
            stop += 1
        for i in range(start, stop):
            concordant += _prefix_sum(tree, p_rank[i])       # strictly lower predictions
        for i in range(start, stop):
            _add(tree, p_rank[i] + 1)
        start = stop
    return concordant / total


def _add(tree, i):
    while i < len(tree):
        tree[i] += 1
        i += i & -i


def _prefix_sum(tree, i):
    # sum of counts at ranks < i (tree is 1-based: rank r stored at r + 1)
    s = 0
    while i > 0:
        s += tree[i]
        i -= i & -i
    return int(s)


def r_auc_bruteforce(y, y_hat) -> float | None:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    gt = y[:, None] > y[None, :]
    total = gt.sum()
    if total == 0:
        return None
    return float((gt & (y_hat[:, None] > y_hat[None, :])).sum() / total)


def pcoc(y, y_hat) -> float | None:
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty input")
    m = y.mean()
    if m == 0:
        return None
    return float(np.mean(y_hat) / m)


def rmse(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty input")
    return float(np.sqrt(np.mean((np.asarray(y_hat, dtype=np.float64) - y) ** 2)))


def n_permutations(n: int, k: int) -> int:
    return math.perm(n, k)


def brute_force_optimum(value_fn: Callable[[np.ndarray], np.ndarray], request: RerankRequest,
                        list_len: int, budget: int = 1_000_000, chunk: int = 65_536):
    """Exact argmax of ``value_fn`` over every ordered selection of ``list_len`` candidates.

    ``value_fn`` maps an (m, L) array of candidate slots to (m,) values. Ties
    resolve to the lexicographically smallest item-id list.
    Returns (best item ids, best value).
    """
    n = len(request.candidates)
    count = n_permutations(n, list_len)
    if count > budget:
        raise ValueError(f"enumeration needs {count} lists, budget is {budget}")
    ids = np.array(request.candidate_ids)
    best_val, best_ids = -np.inf, None
    it = permutations(range(n), list_len)
    while True:
        block = np.array([p for _, p in zip(range(chunk), it)], dtype=np.int64)
        if block.size == 0:
            break
        vals = np.asarray(value_fn(block), dtype=np.float64)
        m = vals.max()
        if m < best_val:
            continue
        for j in np.flatnonzero(vals == m):
            cand = tuple(int(v) for v in ids[block[j]])
            if m > best_val or cand < best_ids:
                best_val, best_ids = m, cand
    return best_ids, float(best_val)


def env_value_fn(env: EnvSpec, request: RerankRequest):
    batch = RequestBatch.from_requests([request])
    point = env.point_logits(batch)
    return lambda block: env.list_values(batch, np.zeros(len(block), dtype=int), block, point)


def write_table(rows: Sequence[dict], path, columns: Sequence[str]) -> None:
    """CSV with one row per variant; absent values left blank."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", *columns])
        for row in rows:
            w.writerow([row["variant"], *("" if row.get(c) is None else f"{row[c]:.4f}"
                                          for c in columns)])
