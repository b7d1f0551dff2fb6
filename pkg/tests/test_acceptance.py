"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Criteria 7-11 share one full-size run (default config: 5000 users x 11
sessions, N=12, L=6, B=4, S=10000). The ablation and beam-size runs reuse
its data split and evaluator.
"""
import itertools
import json
import math
import time

import numpy as np
import pytest

from lookahead_rerank.config import ExperimentConfig
from lookahead_rerank.data import (
    EnvSpec,
    RequestBatch,
    count_distribution,
    load_dataset,
    split_leave_one_out,
    synth_generate,
)
from lookahead_rerank.evaluator import (
    LookaheadEvaluator,
    build_label_matrix,
    eval_loss,
    expected_value,
)
from lookahead_rerank.generator import DistillationTargets, OnlineGenerator, gen_loss
from lookahead_rerank.metrics import evaluate_lists
from lookahead_rerank.miner import LookaheadMiner, beam_search_mine
from lookahead_rerank.numerics import Tensor, grad_check
from lookahead_rerank.pipeline import Run, run_ablations, run_pipeline, run_sweep

from .conftest import TINY, rand_requests, record_criterion

pytestmark = pytest.mark.acceptance


def check(number, ok, detail):
    record_criterion(number, ok, detail)
    assert ok, f"criterion {number}: {detail}"


# 1-6: exact oracles and invariant suites

def test_criterion_01_gradient_fidelity(env):
    start = time.perf_counter()
    data = synth_generate(env, 6, 1, seed=3)
    batch = RequestBatch.from_requests(r.request for r in data)
    pos = np.array([r.request.positions(r.exposed) for r in data])
    labels = build_label_matrix(np.array([r.clicks for r in data]))
    worst = 0.0
    for seed in range(3):
        ev = LookaheadEvaluator(n_layers=2, dtype="float64", random_state=seed, **TINY)
        ev.initialize(batch)
        err = grad_check(lambda: eval_loss(ev.logits(batch, np.arange(6), pos), labels),
                         ev.params_, n_samples=4, seed=seed)
        worst = max(worst, err)

        gen = OnlineGenerator(n_layers=2, dtype="float64", random_state=seed, **TINY)
        gen.initialize(batch)
        recs = LookaheadMiner(ev, beam_size=2).transform([r.request for r in data])
        t = DistillationTargets.from_supervision(recs, batch)

        def g():
            logp, avail = gen.sequence_log_probs(t.batch, t.rows, t.sequence)
            return gen_loss(logp, avail, t.sequence, t.soft, t.weight, 0.5)

        worst = max(worst, grad_check(g, gen.params_, n_samples=4, seed=seed))
    elapsed = time.perf_counter() - start
    check(1, worst < 1e-4 and elapsed < 120,
          f"max relative gradient error {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 120s)")


def test_criterion_02_loss_arithmetic():
    ev = float(eval_loss(Tensor(np.zeros((2, 2))), np.array([[1.0, 0], [1.0, 0]])).data)
    kl = 0.8 * math.log(1.6) + 0.2 * math.log(0.4)
    gl = float(gen_loss(Tensor(np.log([[[0.5, 0.5]]])), np.ones((1, 1, 2), bool),
                        np.array([[0]]), np.array([[[0.8, 0.2]]]), np.ones(1), 0.01).data)
    ok = abs(ev - 1.5 * math.log(2)) < 1e-9 and abs(gl - (math.log(2) + 0.01 * kl)) < 1e-9 \
        and abs(kl - 0.19274) < 5e-6
    check(2, ok, f"eval_loss {ev:.12f} vs 1.5 ln2; gen_loss {gl:.12f} vs ln2 + 0.01*{kl:.5f}")


def test_criterion_03_expectation_identity():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        p = rng.uniform(0.01, 0.99, 6)
        outcomes = np.array(list(itertools.product([0, 1], repeat=6)))
        prob = np.prod(np.where(outcomes == 1, p, 1 - p), axis=1)
        counts = outcomes.sum(axis=1)
        brute = float(prob @ counts)
        tail = [prob[counts >= k].sum() for k in range(1, 7)]
        worst = max(worst, abs(expected_value(tail) - brute))
        # the convolution route used by the environment agrees as well
        pmf = count_distribution(p)
        worst = max(worst, abs(expected_value(1 - np.cumsum(pmf)[:-1]) - brute))
    check(3, worst < 1e-9, f"max |sum_k P(V>=k) - E[V]| = {worst:.2e} over 100 distributions")


def test_criterion_04_beam_oracle_equivalence(env):
    start = time.perf_counter()
    train, _ = split_leave_one_out(synth_generate(env, 60, 3, seed=11))
    ev = LookaheadEvaluator(n_layers=2, n_epochs=2, batch_size=32, dtype="float64",
                            **TINY).fit(train)
    reqs = rand_requests(env, 50, n_candidates=5, seed=4)
    matches = 0
    for req in reqs:
        batch = RequestBatch.from_requests([req])
        perms = np.array(list(itertools.permutations(range(5), 3)))
        values = ev.prefix_values(batch, np.zeros(60, dtype=int), perms)[:, -1]
        ids = batch.item_ids[0]
        best = min(range(60), key=lambda j: (-values[j], ids[perms[j][-1]],
                                             tuple(ids[perms[j][:-1]])))
        beams = beam_search_mine(ev, req, beam_size=60, topk=5, list_len=3)
        matches += beams[0][0] == tuple(int(i) for i in ids[perms[best]])
    elapsed = time.perf_counter() - start
    check(4, matches == 50 and elapsed < 60,
          f"{matches}/50 beam results equal the exhaustive argmax, {elapsed:.1f}s (< 60s)")


def test_criterion_05_pointer_constraints(env, small_data):
    train, _ = small_data
    fit_batch = RequestBatch.from_requests(r.request for r in train)
    repeats = outside = bad_sums = 0
    decodes = 0
    for seed in range(5):
        gen = OnlineGenerator(n_layers=2, dtype="float64", random_state=seed, **TINY)
        gen.initialize(fit_batch)
        reqs = rand_requests(env, 2000, seed=100 + seed)
        batch = RequestBatch.from_requests(reqs)
        slots, dists = gen.decode(batch)
        decodes += len(reqs)
        for i, req in enumerate(reqs):
            chosen = batch.item_ids[i, slots[i]]
            repeats += len(set(chosen.tolist())) != len(chosen)
            outside += not set(chosen.tolist()) <= set(req.candidate_ids)
            for t in range(slots.shape[1]):
                bad_sums += abs(dists[i, t].sum() - 1) > 1e-6 or dists[i, t, slots[i, :t]].any()
    check(5, decodes == 10_000 and repeats == outside == bad_sums == 0,
          f"{decodes} decodes: {repeats} repetitions, {outside} foreign items, "
          f"{bad_sums} invalid step distributions")


def _nested(hr):
    return hr["HR@1%"] <= hr["HR@3%"] <= hr["HR@10%"]


def test_criterion_06_metric_calibration(env):
    reqs = rand_requests(env, 1000, seed=77)
    batch = RequestBatch.from_requests(reqs)
    rng = np.random.default_rng(5)
    pos = np.argsort(rng.random((1000, 12)), axis=1)[:, :6]
    report = evaluate_lists(env, batch, pos, n_samples=10_000, seed=1)
    details, ok = [], _nested(report.hr)
    for k in (1, 3, 10):
        p = k / 100
        se = math.sqrt(p * (1 - p) / 1000)
        got = report.hr[f"HR@{k}%"]
        ok &= abs(got - p) <= 3 * se
        details.append(f"HR@{k}%={got:.3f} (target {p:.2f} +/- {3 * se:.3f})")
    check(6, ok, "random lists: " + ", ".join(details) + "; nested")


# 7-11: full-size runs

@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    config = ExperimentConfig(output_dir=str(tmp_path_factory.mktemp("acceptance") / "full"))
    start = time.perf_counter()
    manifest = run_pipeline(config)
    elapsed = time.perf_counter() - start
    metrics = json.loads(Run(config).metrics_path.read_text())
    return config, manifest, metrics, elapsed


def test_criterion_07_evaluator_quality(full_run):
    config, manifest, metrics, _ = full_run
    n_train = len(load_dataset(Run(config).train_path))
    seconds = manifest.phase_seconds["train_eval"]
    ok = metrics["r_auc"] >= 0.9 and 0.9 <= metrics["pcoc"] <= 1.1 and seconds <= 900 \
        and n_train >= 50_000
    check(7, ok, f"held-out R-AUC {metrics['r_auc']:.4f} (>= 0.9), PCOC {metrics['pcoc']:.4f} "
                 f"(in [0.9, 1.1]), {n_train} train records, training {seconds:.0f}s (<= 900s)")


def test_criterion_08_ablation_ordering(full_run):
    config = full_run[0].with_overrides(
        {"ablation_variants": ("full", "no_hard", "exposure_only")})
    rows = {r["variant"]: r for r in run_ablations(config)["rows"]}
    hr = {v: rows[v]["HR@1%"] for v in rows}
    gap = hr["full"] - hr["no_hard"]
    nested = all(_nested({k: rows[v][k] for k in ("HR@1%", "HR@3%", "HR@10%")}) for v in rows)
    ok = hr["full"] > hr["no_hard"] > hr["exposure_only"] and gap >= 0.2 and nested
    check(8, ok, f"B=2, 3 seeds: HR@1% full {hr['full']:.4f} > no_hard {hr['no_hard']:.4f} > "
                 f"exposure_only {hr['exposure_only']:.4f}; gap {gap:.4f} (>= 0.2)")


def test_criterion_09_beam_trend(full_run):
    points = {p["beam_size"]: p for p in run_sweep(full_run[0], "beam_size", [1, 2, 8])["points"]}
    hr = {b: points[b]["HR@1%"] for b in points}
    ok = hr[8] >= hr[1] and hr[8] >= hr[2]
    check(9, ok, f"3 seeds: HR@1% B=1 {hr[1]:.4f}, B=2 {hr[2]:.4f}, B=8 {hr[8]:.4f}")


def test_criterion_10_determinism(tmp_path):
    small = dict(n_users=600, evaluator_epochs=3, generator_epochs=3, mine_requests=500)
    paths = []
    for name in ("first", "second"):
        config = ExperimentConfig(output_dir=str(tmp_path / name), **small)
        run_pipeline(config)
        paths.append(Run(config).metrics_path)
    same = paths[0].read_bytes() == paths[1].read_bytes()
    check(10, same, "two runs of one config wrote "
                    + ("identical" if same else "different") + " metric reports")


def test_criterion_11_end_to_end_budget(full_run):
    config, manifest, metrics, elapsed = full_run
    ok = elapsed < 1800 and metrics["n_samples"] == 10_000 and config.beam_size == 4 \
        and config.mine_requests == 5000 and _nested(metrics["hr"])
    phases = ", ".join(f"{k} {v:.0f}s" for k, v in manifest.phase_seconds.items())
    check(11, ok, f"full pipeline {elapsed:.0f}s (< 1800s) on this machine; {phases}; "
                  f"HR@1% {metrics['hr']['HR@1%']:.4f}")
