import math

import numpy as np
import pytest

from behavior_search.corpus import WEEK, prepare_corpus
from behavior_search.graph import PropagationConfig, build_graph
from behavior_search.synthetic import PlantedSpec, planted_corpus
from behavior_search.training import (Adam, NegativeSampler, TrainConfig, TrainingDivergence, build_sampler,
                                      build_triples, loss_and_grads, nce_loss, scatter_rows, step, train,
                                      write_log)

from oracles import finite_difference_errors, toy_instance


def test_sampler_word_distribution():
    s = build_sampler([1, 8], [0, 1, 2])
    assert np.allclose(s.word_probs, [1 / (1 + 8 ** 0.75), 8 ** 0.75 / (1 + 8 ** 0.75)])
    assert np.allclose(s.word_probs, [0.1737, 0.8263], atol=1e-4)
    draws = s.words(10 ** 6, np.random.default_rng(0))
    assert abs(np.mean(draws == 0) - 0.1737) < 0.005


def test_sampler_skewed_alias_table():
    counts = np.array([1, 2, 50, 3, 1000, 7])
    s = build_sampler(counts, [0])
    draws = s.words(10 ** 6, np.random.default_rng(1))
    emp = np.bincount(draws, minlength=6) / 10 ** 6
    assert np.abs(emp - s.word_probs).max() < 0.005


def test_sampler_degenerate_and_uniform():
    s = build_sampler([5], [0, 1, 2, 3])
    assert np.all(s.words(1000, np.random.default_rng(0)) == 0)
    draws = s.product_draws(10 ** 6, np.random.default_rng(2))
    assert np.allclose(np.bincount(draws) / 10 ** 6, 0.25, atol=0.005)


def test_negatives_avoid_positive():
    s = build_sampler([1, 1, 1], [0, 1])
    pos = np.zeros(500, dtype=np.int64)
    neg, mask = s.negatives(pos, 4, "word", np.random.default_rng(0))
    assert np.all(neg[mask] != 0)
    # a single-product universe can never avoid the positive: everything masked
    s1 = NegativeSampler(np.array([1.0]), np.array([7]))
    _, mask = s1.negatives(np.array([7, 7]), 3, "product", np.random.default_rng(0))
    assert not mask.any()


def test_nce_loss_examples():
    assert math.isclose(nce_loss(0.0), math.log(2), rel_tol=1e-12)
    assert nce_loss(40.0, [-40.0]) < 1e-12
    assert math.isclose(nce_loss(0.0, [0.0, 0.0]), 3 * math.log(2), rel_tol=1e-12)
    assert np.isfinite(nce_loss(-800.0, [800.0]))


def test_scatter_rows_accumulates_duplicates():
    out = np.zeros((4, 2))
    scatter_rows(out, np.array([1, 3, 1]), np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
    ref = np.zeros((4, 2))
    np.add.at(ref, [1, 3, 1], [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(out, ref)


@pytest.mark.parametrize("mode", ["dot", "cosine"])
@pytest.mark.parametrize("prop", [PropagationConfig(0.3, 0.2, 3), PropagationConfig(0.1, 0.1, 0),
                                  PropagationConfig(0.1, 0.0, 4)])
def test_gradient_check(mode, prop):
    graph, params, batch = toy_instance(1)
    errors = finite_difference_errors(graph, params, batch, prop, mode)
    assert max(errors.values()) <= 1e-4, errors


def test_dead_attention_path():
    graph, params, batch = toy_instance(2)
    batch.h_mask[:] = False
    params.lam = 1.0
    _, _, g = loss_and_grads(params, graph, PropagationConfig(0.1, 0.1, 0), batch)
    for name in ("att_W", "att_b", "att_h", "zero_inquiry", "sequences"):
        assert not g[name].any()


def test_zero_learning_rate_is_a_no_op():
    graph, params, batch = toy_instance(3)
    before = params.copy()
    out = step(params, graph, batch, Adam(params, lr=0.0), TrainConfig(learning_rate=0.0, d=6, d_a=3))
    for name, arr in before.tensors().items():
        assert np.array_equal(arr, getattr(params, name))
    assert out["loss_total"] == out["loss_pr"] + out["loss_lm"]
    assert set(out["grad_norms"]) == set(before.tensors())


def test_adam_matches_reference():
    graph, params, batch = toy_instance(4)
    opt = Adam(params, lr=0.01)
    x = params.products.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, 4):
        _, _, g = loss_and_grads(params, graph, PropagationConfig(), batch)
        gp = g["products"]
        m = 0.9 * m + 0.1 * gp
        v = 0.999 * v + 0.001 * gp ** 2
        x = x - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        opt.update(params, g)
        assert np.allclose(params.products, x, rtol=1e-12, atol=1e-15)


def test_non_finite_loss_raises():
    graph, params, batch = toy_instance(5)
    params.products[0, 0] = np.inf
    with pytest.raises((TrainingDivergence, ValueError)):
        step(params, graph, batch, Adam(params), TrainConfig(d=6, d_a=3))


def _toy_corpus(n_users=12, n_products=10, seed=0, max_seq_len=3):
    records, _ = planted_corpus(PlantedSpec(n_users=n_users, n_products=n_products, n_clusters=2,
                                            min_sequences=3, max_sequences=4, max_seq_len=max_seq_len), seed=seed)
    return prepare_corpus(records, WEEK, min_count=1)


def test_triples_use_strictly_earlier_history():
    corpus = _toy_corpus(40, 20)
    triples = build_triples(corpus.split, corpus.product_queries, corpus.product_words)
    assert len(triples) > 0
    for i in range(len(triples)):
        user, ts = triples.users[i], triples.timestamps[i]
        earlier = {it.product: it.timestamp for s in corpus.split.history[user] for it in s.interactions
                   if it.timestamp < ts}
        assert set(triples.histories[i]) <= set(earlier)
        assert len(set(triples.histories[i])) == len(triples.histories[i])


def test_smoke_training_loss_decreases(tmp_path):
    corpus = _toy_corpus(n_users=9, max_seq_len=2)
    assert corpus.stats()["reviews"] == 50
    graph = build_graph(corpus.split.train, corpus.n_products)
    cfg = TrainConfig(epochs=2, batch_size=8, learning_rate=0.01, d=8, d_a=4, patience=5)
    res = train(corpus, graph, cfg, log_path=tmp_path / "log.csv")
    total = [r["loss_pr"] + r["loss_lm"] for r in res.log]
    assert total[1] < total[0]
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == "epoch,loss_pr,loss_lm,val_hr10,val_ndcg10,val_mrr,wall_seconds"


def test_training_is_deterministic():
    corpus = _toy_corpus(30, 15)
    graph = build_graph(corpus.split.train, corpus.n_products)
    cfg = TrainConfig(epochs=3, batch_size=16, d=8, d_a=4)
    a = train(corpus, graph, cfg, timing=False)
    b = train(corpus, graph, cfg, timing=False)
    for name, arr in a.params.tensors().items():
        assert np.array_equal(arr, getattr(b.params, name))
    assert a.log == b.log


def test_write_log_formats(tmp_path):
    write_log([{"epoch": 1, "loss_pr": 0.5, "loss_lm": 1.0, "val_hr10": 0.1, "val_ndcg10": 0.2,
                "val_mrr": 0.3, "wall_seconds": 0}], tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[1] == "1,0.500000,1.000000,0.100000,0.200000,0.300000,0"
