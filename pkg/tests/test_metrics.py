import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lookahead_rerank.data import RequestBatch
from lookahead_rerank.metrics import (
    brute_force_optimum,
    env_value_fn,
    evaluate_lists,
    hr_at_k,
    hr_hit,
    n_permutations,
    pcoc,
    r_auc,
    r_auc_bruteforce,
    rank_in,
    rmse,
    sample_comparison_set,
    write_table,
)

from .conftest import rand_requests


# hit ratio

def test_hit_threshold_is_strict():
    assert hr_hit(50, 10_000, 1)
    assert not hr_hit(100, 10_000, 1)
    assert hr_hit(99, 10_000, 1)
    assert hr_hit(0, 1, 1) and not hr_hit(1, 1, 100)


def test_empty_comparison_rejected():
    with pytest.raises(ValueError):
        hr_hit(0, 0, 1)


def test_rank_counts_strictly_better(env):
    req = rand_requests(env, 1)[0]
    comp = sample_comparison_set(RequestBatch.from_requests([req]), 0, env, 200, seed=1)
    v = float(np.median(comp.values))
    assert rank_in(v, comp) == int((comp.values > v).sum())
    assert rank_in(comp.values.max(), comp) == 0
    assert hr_at_k(comp.values.max(), comp, 1)


def test_comparison_set_seeding(env):
    batch = RequestBatch.from_requests(rand_requests(env, 2))
    a = sample_comparison_set(batch, 0, env, 50, seed=3)
    b = sample_comparison_set(batch, 0, env, 50, seed=3)
    c = sample_comparison_set(batch, 1, env, 50, seed=3)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.values, b.values)
    assert not np.array_equal(a.positions, c.positions)
    assert len(sample_comparison_set(batch, 0, env, 1)) == 1
    for row in a.positions:
        assert len(set(row)) == 6


def test_comparison_mean_matches_random_policy_average(env):
    # Monte-Carlo consistency: mean of the sampled values vs a separate uniform sample
    batch = RequestBatch.from_requests(rand_requests(env, 1, seed=4))
    comp = sample_comparison_set(batch, 0, env, 20_000, seed=0)
    rng = np.random.default_rng(99)
    pos = np.argsort(rng.random((20_000, 12)), axis=1)[:, :6]
    other = env.list_values(batch, np.zeros(20_000, dtype=int), pos)
    se = math.sqrt(comp.values.var() / 20_000 + other.var() / 20_000)
    assert abs(comp.values.mean() - other.mean()) < 3 * se


def test_evaluate_lists_agrees_with_comparison_sets(env):
    reqs = rand_requests(env, 15, seed=2)
    batch = RequestBatch.from_requests(reqs)
    rng = np.random.default_rng(0)
    pos = np.argsort(rng.random((15, 12)), axis=1)[:, :6]
    report = evaluate_lists(env, batch, pos, n_samples=500, seed=4)
    values = env.list_values(batch, np.arange(15), pos)
    for k in (1, 3, 10):
        hits = [hr_at_k(values[i], sample_comparison_set(batch, i, env, 500, seed=4), k)
                for i in range(15)]
        assert report.hr[f"HR@{k}%"] == pytest.approx(np.mean(hits))


def test_hr_is_nested_and_best_lists_hit(env):
    reqs = rand_requests(env, 10, seed=6)
    batch = RequestBatch.from_requests(reqs)
    best = [brute_force_optimum(env_value_fn(env, r), r, 6)[0] for r in reqs]
    pos = np.array([r.positions(b) for r, b in zip(reqs, best)])
    report = evaluate_lists(env, batch, pos, n_samples=1000)
    assert report.hr["HR@1%"] == 1.0
    rng = np.random.default_rng(1)
    pos = np.argsort(rng.random((10, 12)), axis=1)[:, :6]
    h = evaluate_lists(env, batch, pos, n_samples=1000).hr
    assert h["HR@1%"] <= h["HR@3%"] <= h["HR@10%"]


# evaluator metrics

def test_r_auc_examples():
    assert r_auc([1, 2, 3], [1, 2, 3]) == 1.0
    assert r_auc([1, 2, 3], [3, 2, 1]) == 0.0
    assert r_auc([1, 2], [5, 5]) == 0.0
    assert r_auc([2, 2, 2], [1, 2, 3]) is None


def test_r_auc_shape_mismatch():
    with pytest.raises(ValueError):
        r_auc([1, 2], [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(-3, 3)), min_size=2, max_size=40))
def test_r_auc_matches_pair_count(pairs):
    y, yh = map(np.array, zip(*pairs))
    assert r_auc(y, yh) == r_auc_bruteforce(y, yh)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 60))
def test_r_auc_antisymmetry(seed, n):
    r = np.random.default_rng(seed)
    y = r.integers(0, 4, n).astype(float)
    yh = r.standard_normal(n)
    if len(set(y)) < 2:
        y[0], y[1] = 0, 1
    assert r_auc(y, yh) + r_auc(y, -yh) == pytest.approx(1.0, abs=1e-12)


def test_pcoc_and_rmse_examples():
    y = np.array([0.5, 1.5, 2.0])
    assert pcoc(y, y) == 1.0 and rmse(y, y) == 0.0
    assert pcoc(y, 2 * y) == pytest.approx(2.0)
    assert rmse([0, 1], [1, 0]) == 1.0
    assert pcoc([0, 0], [1, 1]) is None
    with pytest.raises(ValueError):
        rmse([], [])


# exact oracle

def test_permutation_counts():
    assert n_permutations(12, 6) == 665_280
    assert n_permutations(5, 3) == 60


def test_oracle_single_item(env):
    req = rand_requests(env, 1, n_candidates=1)[0]
    ids, _ = brute_force_optimum(env_value_fn(env, req), req, 1)
    assert ids == req.candidate_ids


def test_oracle_dominates_every_list(env):
    req = rand_requests(env, 1, n_candidates=5, seed=3)[0]
    ids, best = brute_force_optimum(env_value_fn(env, req), req, 3)
    from lookahead_rerank.data import env_list_value
    values = [env_list_value(env, req, p) for p in itertools.permutations(req.candidate_ids, 3)]
    assert best >= max(values) - 1e-12
    assert any(abs(v - best) < 1e-12 for v in values)
    assert env_list_value(env, req, ids) == pytest.approx(best, abs=1e-12)


def test_oracle_ties_break_to_smallest_ids(env):
    req = rand_requests(env, 1, n_candidates=4)[0]
    ids, value = brute_force_optimum(lambda block: np.zeros(len(block)), req, 2)
    assert ids == tuple(sorted(req.candidate_ids)[:2]) and value == 0.0


def test_oracle_budget(env):
    req = rand_requests(env, 1)[0]
    with pytest.raises(ValueError, match="665280"):
        brute_force_optimum(env_value_fn(env, req), req, 6, budget=1000)


def test_write_table(tmp_path):
    write_table([{"variant": "full", "HR@1%": 0.5}, {"variant": "x", "HR@1%": None}],
                tmp_path / "t.csv", ["HR@1%"])
    assert (tmp_path / "t.csv").read_text() == "variant,HR@1%\nfull,0.5000\nx,\n"
