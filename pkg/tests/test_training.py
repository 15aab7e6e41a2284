import math

import numpy as np
import pytest

from corpus import APC, AP
from hinsim.hin import GraphError, parse_metapath, synth_graph
from hinsim.model import init_params
from hinsim.pathsim import pathsim
from hinsim.training import (
    AdamWState,
    SplitSpec,
    TrainConfig,
    TrainingDiverged,
    adamw_step,
    build_dataset,
    cosine_lr,
    evaluate_mse,
    load_dataset,
    save_dataset,
    train,
)


@pytest.fixture(scope="module")
def small():
    g = synth_graph(APC, {"A": 40, "P": 50, "C": 6}, {"AP": 90, "PC": 50}, seed=3)
    return g, parse_metapath("A-P-A", APC)


def test_cosine_endpoints():
    assert cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5, rel=1e-12)
    assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-12)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1e-3, 1e-5)


def test_adamw_first_step():
    w = {"x": np.array([[0.0]])}
    adamw_step(w, {"x": np.array([[1.0]])}, AdamWState(), lr=0.1, weight_decay=0.0)
    assert w["x"][0, 0] == pytest.approx(-0.1, abs=1e-8)


def test_adamw_zero_grad_is_noop_without_decay():
    w = {"x": np.array([[1.5, -2.0]])}
    adamw_step(w, {"x": np.zeros((1, 2))}, AdamWState(), lr=0.1, weight_decay=0.0)
    assert w["x"].tolist() == [[1.5, -2.0]]


def test_adamw_decoupled_decay():
    w = {"x": np.array([[2.0]])}
    state = AdamWState()
    for _ in range(3):
        adamw_step(w, {"x": np.zeros((1, 1))}, state, lr=0.5, weight_decay=0.1)
    assert w["x"][0, 0] == pytest.approx(2.0 * 0.95**3, rel=1e-15)


def test_adamw_rejects_nonfinite():
    with pytest.raises(TrainingDiverged, match="non-finite gradient"):
        adamw_step({"x": np.zeros((1, 1))}, {"x": np.array([[np.nan]])}, AdamWState(), lr=0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_max=1e-5, lr_min=1e-3)


def test_dataset_counts_and_labels(small):
    g, p = small
    ds = build_dataset(g, p, SplitSpec(10, 5, 8, 6, seed=1))
    assert len(ds.train) == 60 and len(ds.val) == 30
    assert len(ds.test_rows) == 8
    qs = [set(ds.train_queries), set(ds.val_queries), set(ds.test_queries)]
    assert not (qs[0] & qs[1] or qs[0] & qs[2] or qs[1] & qs[2])
    for s in ds.train[:20]:
        assert g.node_types[s.query] == g.node_types[s.target] == 0
        assert s.label == pathsim(g, p, s.query, s.target)
    for q in ds.train_queries:
        targets = [s.target for s in ds.train if s.query == q]
        assert len(set(targets)) == len(targets)


def test_paper_scale_triplet_count():
    g = synth_graph(AP, {"A": 950, "P": 600}, {"AP": 2000}, seed=0)
    ds = build_dataset(g, parse_metapath("A-P-A", AP), SplitSpec(400, 100, 400, 10, seed=0))
    assert len(ds.train) == 4000


def test_dataset_deterministic(small):
    g, p = small
    a = build_dataset(g, p, SplitSpec(5, 3, 4, 4, seed=9))
    b = build_dataset(g, p, SplitSpec(5, 3, 4, 4, seed=9))
    assert a.train == b.train and a.val == b.val and a.test_queries == b.test_queries


def test_g0_dataset_labels(G0):
    for seed in range(4):
        ds = build_dataset(G0, parse_metapath("A-P-A", AP), SplitSpec(1, 0, 0, 2, seed=seed))
        assert sorted(s.label for s in ds.train) == [pytest.approx(2 / 3), 1.0]


def test_dataset_too_many_queries(small):
    g, p = small
    with pytest.raises(GraphError, match="anchor-type nodes"):
        build_dataset(g, p, SplitSpec(30, 10, 10, 2))


def test_stratified_sampling_hits_support(small):
    g, p = small
    ds = build_dataset(g, p, SplitSpec(20, 0, 0, 10, seed=2))
    for q in ds.train_queries:
        labels = [s.label for s in ds.train if s.query == q]
        positives = sum(l > 0 for l in labels)
        if q in ds.zero_support_queries:
            assert positives == 0
        else:
            # a query with any path instance is in its own support
            assert positives >= 1


def test_dataset_round_trip(tmp_path, small):
    g, p = small
    ds = build_dataset(g, p, SplitSpec(4, 2, 3, 5, seed=0))
    save_dataset(ds, tmp_path, g)
    back = load_dataset(tmp_path, g, ds.candidates)
    assert back.train == ds.train and back.val == ds.val
    assert back.test_queries == ds.test_queries
    assert all(np.array_equal(back.test_rows[q], ds.test_rows[q]) for q in ds.test_queries)


def test_subsample_train_fraction(small):
    g, p = small
    ds = build_dataset(g, p, SplitSpec(10, 2, 2, 3, seed=0))
    half = ds.subsample_train(0.5)
    assert half.train_queries == ds.train_queries[:5]
    assert {s.query for s in half.train} == set(half.train_queries)
    assert half.val == ds.val and half.test_queries == ds.test_queries
    with pytest.raises(ValueError):
        ds.subsample_train(0.0)


class Forbidden(dict):
    def __getitem__(self, key):
        raise AssertionError("training touched a test row")

    def items(self):
        raise AssertionError("training touched a test row")

    values = keys = __iter__ = items


def test_training_never_reads_test_rows(small):
    g, p = small
    ds = build_dataset(g, p, SplitSpec(4, 2, 2, 4, seed=0))
    ds.test_rows = Forbidden()
    train(g, p, ds, TrainConfig(epochs=1, d=4, seed=0))


def test_best_checkpoint_has_lowest_val(small):
    g, p = small
    ds = build_dataset(g, p, SplitSpec(8, 4, 0, 5, seed=0))
    res = train(g, p, ds, TrainConfig(epochs=6, d=8, lr_max=5e-2, seed=0))
    vals = [r["val_loss"] for r in res.log]
    assert evaluate_mse(g, res.params, ds.val) == min(vals)
    assert res.log[res.best_epoch - 1]["val_loss"] == min(vals)
    assert all(r["train_loss"] >= 0 for r in res.log)


def test_vanishing_lr_keeps_loss(small):
    g, p = small
    ds = build_dataset(g, p, SplitSpec(3, 0, 0, 4, seed=0))
    res = train(g, p, ds, TrainConfig(epochs=3, d=4, lr_max=1e-300, lr_min=1e-300, weight_decay=0.0))
    assert len({r["train_loss"] for r in res.log}) == 1


def test_training_is_deterministic(small):
    g, p = small
    ds = build_dataset(g, p, SplitSpec(5, 2, 0, 4, seed=0))
    cfg = TrainConfig(epochs=2, d=6, seed=4)
    a, b = train(g, p, ds, cfg), train(g, p, ds, cfg)
    assert a.log == b.log
    assert all(a.params.weights[k].tobytes() == b.params.weights[k].tobytes() for k in a.params.weights)


def test_training_reduces_loss(small):
    g, p = small
    ds = build_dataset(g, p, SplitSpec(1, 0, 0, 5, seed=1))
    res = train(g, p, ds, TrainConfig(epochs=60, lr_max=1e-2, d=16, seed=0))
    assert res.log[-1]["train_loss"] < 0.1 * res.log[0]["train_loss"]


def test_divergence_reports_last_good(small):
    g, p = small
    ds = build_dataset(g, p, SplitSpec(2, 0, 0, 3, seed=0))
    init = init_params(APC, d=4)
    init.weights["W1"] = np.full_like(init.weights["W1"], np.inf)
    with pytest.raises(TrainingDiverged) as err:
        train(g, p, ds, TrainConfig(epochs=1, d=4), init=init)
    assert err.value.last_good is not None
    assert math.isinf(err.value.last_good.weights["W1"][0, 0])
