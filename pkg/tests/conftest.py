import numpy as np
import pytest

from lookahead_rerank.data import EnvSpec, split_leave_one_out, synth_generate
from lookahead_rerank.evaluator import LookaheadEvaluator
from lookahead_rerank.generator import OnlineGenerator

TINY = dict(embed_dim=4, d_model=8, d_pos=4, n_heads=2, ff_dim=8, n_score_buckets=4)


@pytest.fixture(scope="session")
def env():
    return EnvSpec()


@pytest.fixture(scope="session")
def small_data(env):
    data = synth_generate(env, 40, 3, seed=7)
    return split_leave_one_out(data)


@pytest.fixture(scope="session")
def tiny_evaluator(small_data):
    """Float64 two-layer evaluator, a couple of epochs on the small dataset."""
    train, _ = small_data
    return LookaheadEvaluator(n_layers=2, n_epochs=2, batch_size=32, dtype="float64",
                              **TINY).fit(train)


@pytest.fixture(scope="session")
def tiny_generator(small_data):
    """Untrained float64 generator with fixed seeded weights."""
    train, _ = small_data
    from lookahead_rerank.data import RequestBatch
    batch = RequestBatch.from_requests(r.request for r in train)
    return OnlineGenerator(n_layers=2, dtype="float64", random_state=3, **TINY).initialize(batch)


def rand_requests(env, n, n_candidates=12, seed=0):
    data = synth_generate(env, n, 1, n_candidates=n_candidates,
                          list_len=min(6, n_candidates), seed=seed)
    return [r.request for r in data]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    _CRITERIA[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
