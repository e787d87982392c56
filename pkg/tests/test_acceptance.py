"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` or ``python tests/test_acceptance.py``.
The planted-signal runs (criteria 5 and 7) are shared and take several minutes.
"""
import functools
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from behavior_search import cli  # noqa: E402
from behavior_search.corpus import WEEK, prepare_corpus  # noqa: E402
from behavior_search.evaluation import EvalCase, build_cases, evaluate, evaluate_scores  # noqa: E402
from behavior_search.graph import (PropagationConfig, build_graph, closed_form_propagate, diversity,  # noqa: E402
                                   jumping_propagate, spectral_diagnostics, verify_theorem1)
from behavior_search.synthetic import PlantedSpec, planted_corpus  # noqa: E402
from behavior_search.training import TrainConfig, train  # noqa: E402

from conftest import ACCEPTANCE_LINES, is_connected, random_bipartite  # noqa: E402
from oracles import brute_rank, finite_difference_errors, toy_instance  # noqa: E402

OMEGAS = (0.55, 0.7, 0.9)
BETAS = (0.1, 0.5, 0.9)
LAYERS = (1, 2, 4, 8, 16, 64)
N_GRAPHS = 100

# planted-signal protocol
SEEDS = (0, 1, 2)
EPOCHS = 200
PLANTED_OMEGA, PLANTED_BETA = 0.1, 0.1


def report(number: int, title: str, ok: bool, detail: str, seconds: float) -> None:
    line = f"[criterion {number}] {'PASS' if ok else 'FAIL'}  {title}: {detail} ({seconds:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def graph_family(seed=2024):
    """Deterministic connected random bipartite graphs with at most 200 nodes."""
    rng = np.random.default_rng(seed)
    for _ in range(N_GRAPHS):
        n_p, n_s = rng.integers(10, 101, size=2)
        g = random_bipartite(rng, int(n_p), int(n_s), p=float(rng.uniform(0.15, 0.5)))
        H0 = rng.normal(size=(g.n_nodes, 4))
        yield g, H0


# ---------------------------------------------------------------------------
# 1. Theorem 1 suite


def criterion_1():
    t0 = time.perf_counter()
    instances = viol = viol_first = 0
    limit_fail = decay_fail = connected = 0
    min_ratio, max_decay = np.inf, 0.0
    for g, H0 in graph_family():
        assert g.n_nodes <= 200 and diversity(g, H0) > 0
        connected += is_connected(g)
        for omega in OMEGAS:
            for beta in BETAS:
                rep = verify_theorem1(g, H0, omega, beta, max(LAYERS), layers=LAYERS)
                instances += len(LAYERS)
                viol += len(rep.violations)
                viol_first += rep.violations.count(1)
                # 200-layer behaviour against the analytic limit
                jump = jumping_propagate(g, H0, PropagationConfig(omega, beta, 200)).matrix
                plain = jumping_propagate(g, H0, PropagationConfig(omega, 0.0, 200)).matrix
                limit = spectral_diagnostics(g, omega, beta, H0).limit_diversity
                ratio = diversity(g, jump) / limit
                decay = diversity(g, plain) / rep.initial_diversity
                min_ratio, max_decay = min(min_ratio, ratio), max(max_decay, decay)
                limit_fail += ratio < 0.5
                decay_fail += decay > 1e-3
    seconds = time.perf_counter() - t0
    ok = viol == 0 and limit_fail == 0 and decay_fail == 0 and connected == N_GRAPHS and seconds < 60
    detail = (f"{viol}/{instances} strict-inequality violations ({viol_first} at l=1, {viol - viol_first} at l>=2); "
              f"min jump/limit ratio {min_ratio:.3f}; max plain decay {max_decay:.2e}; "
              f"{connected}/{N_GRAPHS} graphs connected")
    return ok, detail, seconds


def test_criterion_1_theorem_suite():
    ok, detail, seconds = criterion_1()
    report(1, "jumping keeps diversity", ok, detail, seconds)
    assert ok, detail


# ---------------------------------------------------------------------------
# 2. closed form


def criterion_2():
    t0 = time.perf_counter()
    worst = 0.0
    for g, H0 in graph_family():
        for omega in OMEGAS:
            for beta in BETAS:
                for L in LAYERS:
                    cfg = PropagationConfig(omega, beta, L)
                    diff = np.abs(jumping_propagate(g, H0, cfg).matrix - closed_form_propagate(g, H0, cfg)).max()
                    worst = max(worst, float(diff))
    seconds = time.perf_counter() - t0
    return worst <= 1e-6 and seconds < 30, f"max-abs difference {worst:.2e} over {N_GRAPHS * 54} configs", seconds


def test_criterion_2_closed_form():
    ok, detail, seconds = criterion_2()
    report(2, "closed-form equivalence", ok, detail, seconds)
    assert ok, detail


# ---------------------------------------------------------------------------
# 3. gradient oracle


def criterion_3():
    t0 = time.perf_counter()
    worst, worst_name = 0.0, ""
    configs = [PropagationConfig(0.1, 0.1, 4), PropagationConfig(0.7, 0.3, 2), PropagationConfig(0.1, 0.0, 3)]
    for seed in range(2):
        # 10 products + 8 sequences = 18 nodes, 20 words, d = 8
        graph, params, batch = toy_instance(seed, n_products=10, n_sequences=8, n_words=20, d=8, d_a=4)
        for prop in configs:
            for mode in ("dot", "cosine"):
                for name, err in finite_difference_errors(graph, params, batch, prop, mode).items():
                    if err > worst:
                        worst, worst_name = err, f"{name} ({mode}, L={prop.layers})"
    seconds = time.perf_counter() - t0
    return worst <= 1e-4 and seconds < 60, f"max relative error {worst:.2e} at {worst_name}", seconds


def test_criterion_3_gradients():
    ok, detail, seconds = criterion_3()
    report(3, "gradient oracle", ok, detail, seconds)
    assert ok, detail


# ---------------------------------------------------------------------------
# 4. metric oracle


def criterion_4():
    t0 = time.perf_counter()
    rng = np.random.default_rng(44)
    cases, brute = [], []
    score_of = {}
    for i in range(200):
        cand = np.sort(rng.choice(5000, size=1000, replace=False))
        scores = rng.integers(0, 50, size=1000).astype(float)  # plenty of ties
        target = int(cand[rng.integers(1000)])
        case = EvalCase(f"u{i}", 0, target, cand)
        score_of[id(case)] = scores
        cases.append(case)
        brute.append(brute_rank(scores.tolist(), cand.tolist(), target))
    rep = evaluate_scores(lambda c: score_of[id(c)], cases)
    # independent recomputation from the brute-force ranks
    n = len(brute)
    manual = {
        "HR@10": math.fsum(1.0 for r in brute if r <= 10) / n,
        "NDCG@10": math.fsum(1.0 / math.log2(r + 1) for r in brute if r <= 10) / n,
        "NDCG@20": math.fsum(1.0 / math.log2(r + 1) for r in brute if r <= 20) / n,
        "NDCG@100": math.fsum(1.0 / math.log2(r + 1) for r in brute if r <= 100) / n,
        "MRR@100": math.fsum(1.0 / r for r in brute if r <= 100) / n,
    }
    exact = rep.ranks.tolist() == brute and rep.metrics == manual

    big = [EvalCase("u", 0, 0, np.arange(1000)) for _ in range(10000)]
    r = np.random.default_rng(7)
    hr = evaluate_scores(lambda c: r.random(1000), big).metrics["HR@10"]
    seconds = time.perf_counter() - t0
    ok = exact and abs(hr - 0.010) <= 0.005
    return ok, f"200-case aggregates exact={exact}; random-scorer HR@10={hr:.4f}", seconds


def test_criterion_4_metrics():
    ok, detail, seconds = criterion_4()
    report(4, "metric oracle", ok, detail, seconds)
    assert ok, detail


# ---------------------------------------------------------------------------
# 5 and 7. planted-signal experiments (shared runs)


@functools.lru_cache(maxsize=None)
def planted_setup(seed):
    records, _ = planted_corpus(PlantedSpec(), seed=seed)
    corpus = prepare_corpus(records, WEEK, min_count=1)
    graph = build_graph(corpus.split.train, corpus.n_products)
    cases = build_cases(corpus.split, seed=seed)
    return corpus, graph, cases


@functools.lru_cache(maxsize=None)
def planted_run(seed, layers, jump=True):
    """Test NDCG@10 of the best-validation checkpoint for one configuration."""
    corpus, graph, cases = planted_setup(seed)
    prop = PropagationConfig(PLANTED_OMEGA, PLANTED_BETA if jump else 0.0, layers)
    cfg = TrainConfig(epochs=EPOCHS, patience=EPOCHS, propagation=prop, seed=seed)
    t0 = time.perf_counter()
    res = train(corpus, graph, cfg, timing=False)
    enriched = jumping_propagate(graph, res.params.node_embeddings(), prop).matrix[:corpus.n_products]
    ndcg = evaluate(res.params, enriched, cases, corpus.queries).metrics["NDCG@10"]
    return ndcg, time.perf_counter() - t0


def criterion_5():
    sbg = [planted_run(s, 4) for s in SEEDS]
    zam = [planted_run(s, 0) for s in SEEDS]
    seconds = sum(t for _, t in sbg + zam)
    a, b = np.mean([v for v, _ in sbg]), np.mean([v for v, _ in zam])
    gain = a / b - 1.0
    ok = gain >= 0.10 and seconds < 600
    return ok, f"mean test NDCG@10 L=4 {a:.4f} vs L=0 {b:.4f}, relative gain {gain:+.1%}", seconds


@pytest.mark.slow
def test_criterion_5_planted_signal():
    ok, detail, seconds = criterion_5()
    report(5, "planted-signal gain", ok, detail, seconds)
    assert ok, detail


def criterion_7():
    runs = {key: [planted_run(s, *key) for s in SEEDS] for key in [(0,), (4,), (64,), (64, False)]}
    mean = {k: float(np.mean([v for v, _ in r])) for k, r in runs.items()}
    seconds = sum(t for r in runs.values() for _, t in r)
    ok = mean[(4,)] > mean[(0,)] and mean[(4,)] > mean[(64,)] and mean[(64,)] >= mean[(64, False)]
    detail = (f"mean test NDCG@10 L=0 {mean[(0,)]:.4f}, L=4 {mean[(4,)]:.4f}, L=64 {mean[(64,)]:.4f}, "
              f"L=64 without jumping {mean[(64, False)]:.4f}")
    return ok, detail, seconds


@pytest.mark.slow
def test_criterion_7_depth_ablation():
    ok, detail, seconds = criterion_7()
    report(7, "layer-depth ablation", ok, detail, seconds)
    assert ok, detail


# ---------------------------------------------------------------------------
# 6. real data


def magazine_files():
    """Locate (or try to download) the Magazine review and metadata dumps."""
    root = Path(os.environ.get("SBG_DATA_DIR", Path(__file__).resolve().parents[1] / "data" / "magazine"))
    paths = [root / url.rsplit("/", 1)[-1] for url in cli.dataset_urls("magazine")]
    if all(p.exists() for p in paths):
        return paths, ""
    try:
        return [cli.fetch_one(url, root) for url in cli.dataset_urls("magazine")], ""
    except cli.CLIError as exc:
        return None, str(exc)


def criterion_6():
    t0 = time.perf_counter()
    files, why = magazine_files()
    if files is None:
        return False, f"review corpus unavailable ({why})", time.perf_counter() - t0
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        rc = cli.main(["prepare", "--input", str(files[0]), "--meta", str(files[1]), "--input-format", "amazon",
                       "--kcore", "5", "--dataset", "magazine", "--run-dir", str(tmp / "prep")])
        if rc != 0:
            return False, "prepare failed", time.perf_counter() - t0
        import json

        stats = json.loads((tmp / "prep" / "stats.json").read_text())
        ref = cli.REFERENCE_STATS["magazine"]
        within = {k: ref[k] / 2 <= stats[k] <= ref[k] * 2 for k in ref}
        from behavior_search.corpus import load_corpus

        corpus = load_corpus(tmp / "prep")
    graph = build_graph(corpus.split.train, corpus.n_products)
    cases = build_cases(corpus.split, seed=0)
    scores = {}
    for L in (4, 0):
        prop = PropagationConfig(0.1, 0.1, L)
        res = train(corpus, graph, TrainConfig(epochs=EPOCHS, patience=20, propagation=prop), timing=False)
        enriched = jumping_propagate(graph, res.params.node_embeddings(), prop).matrix[:corpus.n_products]
        scores[L] = evaluate(res.params, enriched, cases, corpus.queries).metrics["NDCG@10"]
    seconds = time.perf_counter() - t0
    ok = scores[4] > scores[0] and all(within.values()) and seconds < 1800
    detail = (f"NDCG@10 L=4 {scores[4]:.4f} vs L=0 {scores[0]:.4f}; stats {stats}; "
              f"outside 2x: {[k for k, v in within.items() if not v]}")
    return ok, detail, seconds


@pytest.mark.slow
def test_criterion_6_real_data():
    ok, detail, seconds = criterion_6()
    report(6, "real-data directional check", ok, detail, seconds)
    assert ok, detail


# ---------------------------------------------------------------------------
# 8. determinism


def criterion_8():
    t0 = time.perf_counter()
    records, _ = planted_corpus(PlantedSpec(n_users=300, n_products=150), seed=8)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        from behavior_search.corpus import write_tsv

        write_tsv(records, tmp / "raw.tsv")
        common = ["--min-count", "1", "--epochs", "3", "--batch-size", "256", "--seed", "5"]
        for run in ("a", "b"):
            base = tmp / run
            assert cli.main(["prepare", "--input", str(tmp / "raw.tsv"), "--run-dir", str(base / "prep"), *common]) == 0
            assert cli.main(["train", "--corpus", str(base / "prep"), "--run-dir", str(base / "train"),
                             "--no-timing", *common]) == 0
            assert cli.main(["eval", "--corpus", str(base / "prep"), "--checkpoint", str(base / "train" / "checkpoint"),
                             "--run-dir", str(base / "eval"), *common]) == 0
        files = sorted(p.relative_to(tmp / "a") for p in (tmp / "a").rglob("*") if p.is_file())
        differ = [str(f) for f in files if (tmp / "a" / f).read_bytes() != (tmp / "b" / f).read_bytes()]
    seconds = time.perf_counter() - t0
    return not differ and len(files) > 10, f"{len(files)} artifacts compared, differing: {differ or 'none'}", seconds


def test_criterion_8_determinism():
    ok, detail, seconds = criterion_8()
    report(8, "bit-identical reruns", ok, detail, seconds)
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for n, title, fn in [(1, "jumping keeps diversity", criterion_1), (2, "closed-form equivalence", criterion_2),
                         (3, "gradient oracle", criterion_3), (4, "metric oracle", criterion_4),
                         (5, "planted-signal gain", criterion_5), (6, "real-data directional check", criterion_6),
                         (7, "layer-depth ablation", criterion_7), (8, "bit-identical reruns", criterion_8)]:
        ok, detail, seconds = fn()
        report(n, title, ok, detail, seconds)
        failed += not ok
    sys.exit(1 if failed else 0)
