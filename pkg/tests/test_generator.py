import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lookahead_rerank.data import RequestBatch, RerankRequest
from lookahead_rerank.generator import (
    DistillationTargets,
    OnlineGenerator,
    availability,
    gen_loss,
    pointer_probs,
)
from lookahead_rerank.miner import LookaheadMiner
from lookahead_rerank.numerics import Tensor, grad_check

from .conftest import TINY, rand_requests


def _batch(requests):
    return RequestBatch.from_requests(requests)


def _shuffled(req, perm):
    return RerankRequest(req.request_id, req.user_id, req.user_feats, req.ctx_feats,
                         tuple(req.candidates[i] for i in perm))


# pointer distribution

def test_single_available_candidate_gets_all_mass(rng):
    p = pointer_probs(rng.standard_normal(4), rng.standard_normal((5, 4)),
                      np.array([0, 0, 1, 0, 0], bool))
    assert p.tolist() == [0, 0, 1, 0, 0]


def test_zero_state_is_uniform_over_available(rng):
    avail = np.array([1, 0, 1, 1, 0, 1], bool)
    p = pointer_probs(np.zeros(3), rng.standard_normal((6, 3)), avail)
    np.testing.assert_allclose(p[avail], 0.25, atol=1e-15)
    assert np.all(p[~avail] == 0)


def test_fully_masked_rejected(rng):
    with pytest.raises(ValueError):
        pointer_probs(np.ones(3), rng.standard_normal((4, 3)), np.zeros(4, bool))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10))
def test_scaling_memory_keeps_ranking(seed, c):
    r = np.random.default_rng(seed)
    h, m = r.standard_normal(4), r.standard_normal((8, 4))
    avail = r.random(8) < 0.7
    avail[0] = True
    p, q = pointer_probs(h, m, avail), pointer_probs(h, c * m, avail)
    assert np.argmax(p) == np.argmax(q)
    idx = np.flatnonzero(avail)
    np.testing.assert_array_equal(np.argsort(-p[idx], kind="stable"),
                                  np.argsort(-q[idx], kind="stable"))


def test_availability_mask():
    avail = availability(np.array([[2, 0, 1]]), 4)
    assert avail[0].astype(int).tolist() == [[1, 1, 1, 1], [1, 1, 0, 1], [0, 1, 0, 1]]


# loss

def _hand_case():
    logp = Tensor(np.log(np.array([[[0.5, 0.5]]])))
    avail = np.ones((1, 1, 2), bool)
    return logp, avail, np.array([[0]]), np.array([[[0.8, 0.2]]]), np.array([1.0])


def test_hand_case_loss():
    logp, avail, hard, soft, w = _hand_case()
    kl = 0.8 * math.log(1.6) + 0.2 * math.log(0.4)
    assert kl == pytest.approx(0.19274, abs=1e-5)
    loss = float(gen_loss(logp, avail, hard, soft, w, 0.01).data)
    assert loss == pytest.approx(math.log(2) + 0.01 * kl, abs=1e-9)
    assert loss == pytest.approx(0.6950, abs=2e-4)


def test_matching_one_hot_gives_zero_loss():
    logp = Tensor(np.log(np.array([[[1.0, 1e-300]]])))
    loss = gen_loss(logp, np.ones((1, 1, 2), bool), np.array([[0]]), np.array([[[1.0, 0.0]]]),
                    np.array([1.0]), 0.3)
    assert abs(float(loss.data)) < 1e-12


def test_alpha_zero_is_weighted_cross_entropy(rng):
    logits = rng.standard_normal((3, 2, 4))
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    hard = np.array([[0, 1], [2, 3], [1, 0]])
    w = np.array([0.5, 1.0, 1.5])
    loss = gen_loss(Tensor(logp), np.ones((3, 2, 4), bool), hard, np.zeros((3, 2, 4)), w, 0.0)
    ce = -np.take_along_axis(logp, hard[..., None], -1)[..., 0].sum(-1)
    assert float(loss.data) == pytest.approx(float((w * ce).mean()), abs=1e-12)


def test_loss_decomposes_in_alpha(tiny_generator, env):
    reqs = rand_requests(env, 5, seed=3)
    recs = LookaheadMiner(_scorer(), beam_size=2).transform(reqs)
    t = DistillationTargets.from_supervision(recs, reqs)
    logp, avail = tiny_generator.sequence_log_probs(t.batch, t.rows, t.sequence)
    kl_part = float(gen_loss(logp, avail, t.sequence, t.soft, t.weight, 1.0, use_hard=False).data)
    base = float(gen_loss(logp, avail, t.sequence, t.soft, t.weight, 0.0).data)
    for alpha in np.random.default_rng(0).uniform(0, 5, 10):
        full = float(gen_loss(logp, avail, t.sequence, t.soft, t.weight, alpha).data)
        assert full == pytest.approx(base + alpha * kl_part, abs=1e-9)


def test_soft_mass_on_chosen_item_rejected_with_step():
    logp = Tensor(np.log(np.full((1, 2, 3), 1 / 3)))
    avail = availability(np.array([[1, 0]]), 3)
    soft = np.array([[[0.2, 0.3, 0.5], [0.5, 0.5, 0.0]]])
    with pytest.raises(ValueError, match="step 1"):
        gen_loss(logp, avail, np.array([[1, 0]]), soft, np.ones(1), 0.1)


def test_unavailable_hard_label_rejected():
    logp = Tensor(np.log(np.full((1, 2, 3), 1 / 3)))
    avail = availability(np.array([[1, 0]]), 3)
    with pytest.raises(ValueError, match="step 1"):
        gen_loss(logp, avail, np.array([[1, 1]]), np.zeros((1, 2, 3)), np.ones(1), 0.0)


def test_loss_without_terms_rejected():
    logp, avail, hard, soft, w = _hand_case()
    with pytest.raises(ValueError):
        gen_loss(logp, avail, hard, soft, w, 0.0, use_hard=False)


class _scorer:
    """Stand-in evaluator: a fixed random value per (request, item, position)."""

    def __init__(self, max_len=6, n_items=200):
        self.max_len = max_len
        self.n_items = n_items
        self.table = np.random.default_rng(0).random((200, 6))

    def _check_fitted(self):
        pass

    def prefix_values(self, batch, rows, positions):
        ids = batch.item_ids[rows[:, None], positions]
        return np.cumsum(self.table[ids, np.arange(positions.shape[1])], axis=1)


def test_full_loss_gradient(small_data, env):
    train, _ = small_data
    gen = OnlineGenerator(n_layers=2, list_len=3, dtype="float64", random_state=4, **TINY)
    reqs = rand_requests(env, 3, seed=1)
    gen.initialize(_batch(r.request for r in train))
    recs = LookaheadMiner(_scorer(max_len=3), beam_size=2).transform(reqs)
    t = DistillationTargets.from_supervision(recs, reqs)

    def f():
        logp, avail = gen.sequence_log_probs(t.batch, t.rows, t.sequence)
        return gen_loss(logp, avail, t.sequence, t.soft, t.weight, 0.5)

    assert grad_check(f, gen.params_, n_samples=3) < 1e-4


# network structure

def test_memory_shape_and_bidirectional_context(tiny_generator, env):
    req = rand_requests(env, 1, seed=2)[0]
    m = tiny_generator.encode_candidates(_batch([req]), [0]).data
    assert m.shape == (1, 12, tiny_generator.d_model)
    batch = _batch([req])
    batch.item_feats[0, 7] += 1.0
    m2 = tiny_generator.encode_candidates(batch, [0]).data
    for i in range(12):
        assert not np.allclose(m[0, i], m2[0, i])


def test_encoder_is_permutation_equivariant(tiny_generator, env):
    req = rand_requests(env, 1, seed=2)[0]
    perm = np.random.default_rng(1).permutation(12)
    m = tiny_generator.encode_candidates(_batch([req]), [0]).data[0]
    mp = tiny_generator.encode_candidates(_batch([_shuffled(req, perm)]), [0]).data[0]
    np.testing.assert_allclose(mp, m[perm], atol=1e-12)


def test_duplicate_candidates_get_identical_rows(tiny_generator, env):
    gen = copy.deepcopy(tiny_generator)
    req = rand_requests(env, 1, seed=2)[0]
    a, b = req.candidates[0], req.candidates[5]
    table = gen.params_["feat.item_id.table"].data
    table[b.id] = table[a.id]
    twin = type(b)(b.id, a.feats, a.score)
    req = RerankRequest(req.request_id, req.user_id, req.user_feats, req.ctx_feats,
                        req.candidates[:5] + (twin,) + req.candidates[6:])
    m = gen.encode_candidates(_batch([req]), [0]).data[0]
    np.testing.assert_allclose(m[0], m[5], atol=1e-12)


def test_start_embedding_is_affine(tiny_generator, small_data, rng):
    du = len(small_data[0][0].request.user_feats)
    u1, u2 = rng.standard_normal((2, 1, du))
    f = lambda u: tiny_generator.start_embedding(u).data
    b = tiny_generator.params_["start.bias"].data
    # the user field passes through its own affine embedding first
    zero = f(np.zeros((1, du)))
    np.testing.assert_allclose(f(u1 + u2), f(u1) + f(u2) - zero, atol=1e-12)
    gen = copy.deepcopy(tiny_generator)
    gen.params_["start.weight"].data[...] = 0
    np.testing.assert_array_equal(gen.start_embedding(u1).data[0], b)
    np.testing.assert_array_equal(gen.start_embedding(u2).data[0], b)


def test_first_pick_is_personalised(tiny_generator, env):
    req = rand_requests(env, 1, seed=2)[0]
    users = np.random.default_rng(5).standard_normal((40, len(req.user_feats)))
    firsts = set()
    for u in users:
        r = RerankRequest(req.request_id, req.user_id, tuple(u), req.ctx_feats, req.candidates)
        firsts.add(tiny_generator.predict([r])[0][0])
    assert len(firsts) > 1


def test_decoder_is_causal(tiny_generator, env):
    req = rand_requests(env, 1, seed=2)[0]
    batch = _batch([req])
    seq = np.array([[0, 1, 2, 3, 4, 5]])
    base, _ = tiny_generator.sequence_log_probs(batch, [0], seq)
    for t in range(5):
        other = seq.copy()
        other[0, t] = 6 + t
        lp, _ = tiny_generator.sequence_log_probs(batch, [0], other)
        np.testing.assert_array_equal(lp.data[:, :t + 1], base.data[:, :t + 1])
        assert not np.allclose(lp.data[:, t + 1:], base.data[:, t + 1:])


# decoding

def test_decode_is_deterministic_and_valid(tiny_generator, env):
    reqs = rand_requests(env, 30, seed=8)
    batch = _batch(reqs)
    s1, p1 = tiny_generator.decode(batch)
    s2, p2 = tiny_generator.decode(batch)
    assert np.array_equal(s1, s2) and np.array_equal(p1, p2)
    for i in range(30):
        assert len(set(s1[i])) == 6
        for t in range(6):
            assert np.all(p1[i, t, s1[i, :t]] == 0)
            assert p1[i, t].sum() == pytest.approx(1.0, abs=1e-6)
            assert s1[i, t] == np.argmax(p1[i, t])


def test_batched_decode_matches_serial(tiny_generator, env):
    reqs = rand_requests(env, 20, seed=9)
    s, p = tiny_generator.decode(_batch(reqs))
    for i, r in enumerate(reqs):
        si, pi = tiny_generator.decode(_batch([r]))
        assert np.array_equal(si[0], s[i]) and np.array_equal(pi[0], p[i])


def test_full_length_decode_is_permutation(env, small_data):
    gen = OnlineGenerator(n_layers=1, list_len=5, dtype="float64", **TINY)
    gen.initialize(_batch(r.request for r in small_data[0]))
    req = rand_requests(env, 1, n_candidates=5)[0]
    assert sorted(gen.predict([req])[0]) == sorted(req.candidate_ids)


def test_list_longer_than_candidates_rejected(tiny_generator, env):
    req = rand_requests(env, 1, n_candidates=5)[0]
    with pytest.raises(ValueError):
        tiny_generator.predict([req])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_candidate_order_does_not_matter(tiny_generator, env, seed):
    req = rand_requests(env, 1, seed=seed % 1000)[0]
    perm = np.random.default_rng(seed).permutation(12)
    assert tiny_generator.predict([req]) == tiny_generator.predict([_shuffled(req, perm)])


def test_argmax_ties_go_to_smallest_id(tiny_generator, env):
    gen = copy.deepcopy(tiny_generator)
    for name in list(gen.params_):
        if name.startswith("decoder.") or name.startswith("dec_proj") or name.startswith("start"):
            gen.params_[name].data[...] = 0
    # zero decoder output: every step is uniform, so picks follow item id order
    req = rand_requests(env, 1, seed=2)[0]
    ((*ids,),) = gen.predict([req])
    assert ids == sorted(req.candidate_ids)[:6]


# training

@pytest.fixture(scope="module")
def mined(tiny_evaluator, small_data):
    train, _ = small_data
    reqs = [r.request for r in train[:30]]
    return LookaheadMiner(tiny_evaluator, beam_size=2).transform(reqs), reqs


@pytest.mark.parametrize("ablation", ["full", "no_soft", "no_weight", "no_hard"])
def test_ablations_train(mined, ablation):
    recs, reqs = mined
    gen = OnlineGenerator(n_layers=1, n_epochs=2, batch_size=16, ablation=ablation, **TINY)
    gen.fit(recs, reqs)
    rep = gen.report_
    assert rep["n_supervision_records"] == 60 and rep["n_exposure_records"] == 0
    assert rep["alpha"] == (0.0 if ablation == "no_soft" else 0.01)
    assert rep["use_hard"] == (ablation != "no_hard")
    assert len(rep["history"]) == 2 and np.isfinite(rep["history"][-1]["loss"])


def test_no_weight_uses_unit_effective_weights(mined):
    recs, reqs = mined
    gen = OnlineGenerator(ablation="no_weight", **TINY)
    t = DistillationTargets.from_supervision(recs, reqs)
    _, w, _ = gen._loss_switches(t)
    assert np.all(w == 1.0)
    assert not np.all(t.weight == 1.0)


def test_exposure_only_consumes_no_supervision(small_data, mined):
    train, _ = small_data
    gen = OnlineGenerator(n_layers=1, n_epochs=1, batch_size=32, ablation="exposure_only",
                          **TINY).fit(train)
    assert gen.report_["n_supervision_records"] == 0
    assert gen.report_["n_exposure_records"] == len(train)
    with pytest.raises(ValueError):
        OnlineGenerator(ablation="exposure_only", **TINY).fit(mined[0], mined[1])
    with pytest.raises(ValueError):
        OnlineGenerator(**TINY).fit(train)


def test_alpha_zero_equals_no_soft(mined):
    recs, reqs = mined
    a = OnlineGenerator(n_layers=1, n_epochs=2, batch_size=16, alpha=0.0, **TINY).fit(recs, reqs)
    b = OnlineGenerator(n_layers=1, n_epochs=2, batch_size=16, ablation="no_soft",
                        **TINY).fit(recs, reqs)
    for k, v in a.params_.arrays().items():
        assert np.array_equal(v, b.params_.arrays()[k])


def test_unknown_ablation_and_empty_data_rejected(mined):
    with pytest.raises(ValueError):
        OnlineGenerator(ablation="no_everything", **TINY).fit(*mined)
    with pytest.raises(ValueError):
        OnlineGenerator(**TINY).fit([], [])


def test_training_imitates_a_single_target(env, small_data):
    # one request, one mined list: the generator should learn to reproduce it
    req = rand_requests(env, 1, seed=21)[0]
    recs = LookaheadMiner(_scorer(), beam_size=1).transform([req])
    gen = OnlineGenerator(n_layers=1, n_epochs=150, batch_size=1, learning_rate=1e-2,
                          alpha=0.0, **TINY).fit(recs, [req])
    assert gen.predict([req])[0] == recs[0].sequence


def test_checkpoint_round_trip(mined, env, tmp_path):
    recs, reqs = mined
    gen = OnlineGenerator(n_layers=1, n_epochs=1, batch_size=16, **TINY).fit(recs, reqs)
    gen.save(tmp_path / "g.ckpt")
    back = OnlineGenerator.load(tmp_path / "g.ckpt")
    test = rand_requests(env, 10, seed=4)
    assert back.predict(test) == gen.predict(test)
    assert back.get_params() == gen.get_params()
