import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corpus import APC
from hinsim.hin import parse_metapath, synth_graph
from hinsim.metrics import (
    ConstantBackend,
    EvalReport,
    ExactBackend,
    RandomBackend,
    evaluate_approximation,
    evaluate_search,
    linear_fit_r2,
    ndcg_at_k,
    rmse,
    sweep_report,
    timing_report,
)
from hinsim.training import Dataset, SplitSpec, build_dataset


def g0_dataset():
    # test query a1 with its exact row {a1: 1, a2: 2/3}
    row = np.array([1.0, 2.0 / 3.0])
    return Dataset("APA", np.array([0, 1]), [], [], [], [], [0], {0: row})


class Fixed:
    name = "fixed"

    def __init__(self, scores):
        self.s = np.asarray(scores, dtype=np.float64)

    def scores(self, query, candidates):
        return self.s[candidates]


class Warped:
    """A strictly increasing transform of another backend's scores."""

    name = "warped"

    def __init__(self, inner):
        self.inner = inner

    def scores(self, query, candidates):
        return np.exp(3.0 * self.inner.scores(query, candidates)) - 7.0


def test_rmse_examples():
    assert rmse([0.3, 0.2], [0.3, 0.2]) == 0.0
    assert rmse([1, 0], [0, 0]) == pytest.approx(math.sqrt(0.5), abs=1e-12)
    assert abs(rmse([1, 0], [0, 0]) - 0.70711) < 1e-5
    assert rmse([0.1, 0.9, 0.4], [0.5, 0.2, 0.4]) == rmse([0.5, 0.2, 0.4], [0.1, 0.9, 0.4])
    with pytest.raises(ValueError):
        rmse([], [])
    with pytest.raises(ValueError):
        rmse([1.0], [1.0, 2.0])


def test_ndcg_examples():
    assert ndcg_at_k(["a", "b"], {"a": 1.0, "b": 0.0}, 2) == 1.0
    assert ndcg_at_k(["b", "a"], {"a": 1.0, "b": 0.0}, 2) == pytest.approx(1 / math.log2(3), abs=1e-12)
    assert abs(ndcg_at_k(["b", "a"], {"a": 1.0, "b": 0.0}, 2) - 0.63093) < 1e-5
    assert ndcg_at_k(["a", "b"], {"a": 0.0, "b": 0.0}, 2) == 0.0
    with pytest.raises(ValueError):
        ndcg_at_k(["a"], {"a": 1.0}, 0)


def test_constant_zero_on_g0_row():
    rep = evaluate_approximation(ConstantBackend(0.0), g0_dataset())
    assert rep.rmse == pytest.approx(math.sqrt((1 + 4 / 9) / 2), abs=1e-12)
    assert abs(rep.rmse - 0.84984) < 1e-5
    assert rep.n_pairs == 2


def test_g0_search_single_candidate():
    rep = evaluate_search(Fixed([0.0, 0.3]), g0_dataset(), k=1)
    assert rep.ndcg == 1.0
    # with the query kept in play and ranked first, the ideal order is still matched
    assert evaluate_search(Fixed([0.9, 0.3]), g0_dataset(), k=1, include_self=True).ndcg == 1.0
    assert evaluate_search(Fixed([0.1, 0.3]), g0_dataset(), k=1, include_self=True).ndcg == pytest.approx(2 / 3)


@pytest.fixture(scope="module")
def synth_ds():
    g = synth_graph(APC, {"A": 60, "P": 80, "C": 6}, {"AP": 150, "PC": 80}, seed=4)
    p = parse_metapath("A-P-A", APC)
    return g, p, build_dataset(g, p, SplitSpec(10, 5, 20, 6, seed=0))


def test_exact_backend_self_evaluation(synth_ds):
    g, p, ds = synth_ds
    ex = ExactBackend(g, p)
    assert evaluate_approximation(ex, ds).rmse == 0.0
    rep = evaluate_search(ex, ds, k=10)
    for q, v in rep.per_query_ndcg.items():
        assert v == (0.0 if q in rep.zero_idcg_queries else 1.0)


def test_random_backend_reproducible(synth_ds):
    g, p, ds = synth_ds
    a = evaluate_search(RandomBackend(3), ds, k=10).ndcg
    assert a == evaluate_search(RandomBackend(3), ds, k=10).ndcg
    assert a < 1.0
    assert a != evaluate_search(RandomBackend(4), ds, k=10).ndcg


def test_ndcg_monotone_invariance(synth_ds):
    g, p, ds = synth_ds
    base = RandomBackend(7)
    assert evaluate_search(base, ds, k=10).per_query_ndcg == evaluate_search(Warped(base), ds, k=10).per_query_ndcg


def test_missing_row_is_an_error():
    ds = g0_dataset()
    ds.test_queries = [0, 1]
    with pytest.raises(KeyError, match="missing exact row"):
        evaluate_approximation(ConstantBackend(0.0), ds)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.integers(1, 12), st.data())
def test_moving_relevant_item_up_never_hurts(rels, k, data):
    items = list(range(len(rels)))
    relevance = dict(zip(items, rels))
    ranking = data.draw(st.permutations(items))
    i = data.draw(st.integers(1, len(ranking) - 1))
    if relevance[ranking[i]] < relevance[ranking[i - 1]]:
        return
    swapped = list(ranking)
    swapped[i - 1], swapped[i] = swapped[i], swapped[i - 1]
    assert ndcg_at_k(swapped, relevance, k) >= ndcg_at_k(ranking, relevance, k) - 1e-15


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.integers(1, 10))
def test_ndcg_bounds(rels, k):
    relevance = dict(enumerate(rels))
    v = ndcg_at_k(list(reversed(range(len(rels)))), relevance, k)
    assert 0.0 <= v <= 1.0 + 1e-12


def test_report_files(tmp_path, synth_ds):
    g, p, ds = synth_ds
    rep = evaluate_search(ExactBackend(g, p), ds, k=5, report=evaluate_approximation(ExactBackend(g, p), ds))
    rep.write(tmp_path, g)
    doc = json.loads((tmp_path / "eval_report.json").read_text())
    assert doc["rmse"] == 0.0 and doc["k"] == 5
    lines = (tmp_path / "eval_per_query.tsv").read_text().splitlines()
    assert lines[0] == "query\trmse\tndcg" and len(lines) == 21


def test_sweep_tables(tmp_path):
    one = sweep_report([({"T": 1}, EvalReport("APA", "neupath", rmse=0.1))], "T", tmp_path / "one")
    assert len(one[0].read_text().splitlines()) == 2
    results = [({"T": t}, EvalReport("APA", "neupath", k=10, rmse=0.1 * t, ndcg=1 - 0.1 * t)) for t in range(1, 6)]
    paths = sweep_report(results, "T", tmp_path / "five")
    assert len(paths[0].read_text().splitlines()) == 6
    assert paths[1].read_text().splitlines()[0] == "1\t0.1"
    with pytest.raises(ValueError):
        sweep_report([], "T", tmp_path)


def test_timing_fit(tmp_path):
    path, r2 = timing_report([(1000, 1.0), (2000, 2.0), (4000, 4.0)], tmp_path)
    assert r2 == pytest.approx(1.0)
    assert path.read_text().splitlines()[1] == "1000\t1.000000"
    slope, intercept, _ = linear_fit_r2([1, 2, 3], [3, 5, 7])
    assert (slope, intercept) == pytest.approx((2.0, 1.0))
