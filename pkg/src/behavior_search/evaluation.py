"""Candidate-pool construction and rank metrics (HR@K, NDCG@K, MRR@N)."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams, batch_forward, evaluation_history, pad

CUTOFFS = {"HR@10": ("hr", 10), "NDCG@10": ("ndcg", 10), "NDCG@20": ("ndcg", 20),
           "NDCG@100": ("ndcg", 100), "MRR@100": ("mrr", 100)}


@dataclass
class EvalCase:
    user_id: str
    query_id: int
    target: int
    candidates: np.ndarray
    history: tuple[int, ...] = ()


@dataclass
class EvalReport:
    metrics: dict[str, float]
    ranks: np.ndarray
    cases: list[EvalCase] = field(repr=False)
    fingerprint: str = ""

    @property
    def n_cases(self) -> int:
        return len(self.ranks)

    def table(self) -> str:
        lines = [f"{'metric':<10}{'value':>10}", "-" * 20]
        lines += [f"{k:<10}{v:>10.4f}" for k, v in self.metrics.items()]
        lines.append(f"{'cases':<10}{self.n_cases:>10d}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, prefix: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{prefix}.txt").write_text(self.table())
        payload = {**self.metrics, "cases": self.n_cases, "fingerprint": self.fingerprint}
        (out / f"{prefix}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        with open(out / f"{prefix}_cases.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_id", "query_id", "target", "rank"])
            for case, r in zip(self.cases, self.ranks):
                w.writerow([case.user_id, case.query_id, case.target, int(r)])


def metric_hr(rank: int, k: int) -> int:
    if rank < 1:
        raise ValueError("rank is 1-based")
    return int(rank <= k)


def metric_ndcg(rank: int, k: int) -> float:
    if rank < 1:
        raise ValueError("rank is 1-based")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def metric_mrr(rank: int, n: int = 100) -> float:
    if rank < 1:
        raise ValueError("rank is 1-based")
    return 1.0 / rank if rank <= n else 0.0


_METRIC_FNS = {"hr": metric_hr, "ndcg": metric_ndcg, "mrr": metric_mrr}


def aggregate(ranks) -> dict[str, float]:
    """Unweighted mean of every per-case metric (compensated summation)."""
    ranks = [int(r) for r in ranks]
    n = max(len(ranks), 1)
    return {name: math.fsum(_METRIC_FNS[kind](r, k) for r in ranks) / n
            for name, (kind, k) in CUTOFFS.items()}


def _sample_pool(rng, universe: np.ndarray, target: int, pool_size: int) -> np.ndarray:
    pos = np.searchsorted(universe, target)
    if pos >= len(universe) or universe[pos] != target:
        raise ValueError(f"target {target} is not a training product")
    n_neg = min(pool_size, len(universe)) - 1
    picks = rng.choice(len(universe) - 1, size=n_neg, replace=False)
    picks = picks + (picks >= pos)
    return np.sort(np.concatenate([[target], universe[picks]]))


def build_cases(split, seed: int = 0, pool_size: int = 1000, which: str = "test",
                history_cap: int = 20, universe=None) -> list[EvalCase]:
    """One case per (user, query, target) in the chosen evaluation sequences.

    Negatives are drawn uniformly without replacement from training products.
    When fewer than ``pool_size`` training products exist the pool is the
    whole universe.
    """
    seqs = split.test if which == "test" else split.validation
    universe = np.asarray(universe if universe is not None else split.train_products(), dtype=np.int64)
    rng = np.random.default_rng([seed, 0x5EED])
    cases = []
    for seq in seqs:
        hist = evaluation_history(split.history.get(seq.user_id, []), history_cap)
        for it in seq.interactions:
            if it.query < 0:
                continue
            cand = _sample_pool(rng, universe, it.product, pool_size)
            cases.append(EvalCase(seq.user_id, it.query, it.product, cand, hist))
    if which == "test" and not cases:
        raise ValueError("test split yields no evaluation cases")
    return cases


def target_ranks(scores: np.ndarray, candidates: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target, ties resolved toward the lower product index."""
    is_t = candidates == targets[:, None]
    s_t = np.sum(np.where(is_t, scores, 0.0), axis=1, keepdims=True)
    ahead = (scores > s_t) | ((scores == s_t) & (candidates < targets[:, None]))
    return 1 + ahead.sum(axis=1)


def query_matrix(queries):
    return pad([q.token_indices for q in queries])


def case_scores(params: ModelParams, enriched_products, cases, queries, mode="dot", chunk=512):
    """Score every candidate of every case; yields arrays aligned with ``candidates``."""
    q_all, q_all_mask = query_matrix(queries)
    P = params.products
    if mode == "cosine":
        P = P / np.maximum(np.linalg.norm(P, axis=1, keepdims=True), 1e-12)
    for start in range(0, len(cases), chunk):
        part = cases[start:start + chunk]
        qids = np.array([c.query_id for c in part])
        hist, hmask = pad([c.history for c in part])
        fc = batch_forward(params, enriched_products, q_all[qids], q_all_mask[qids], hist, hmask)
        m = fc.m
        if mode == "cosine":
            m = m / np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-12)
        elif mode != "dot":
            raise ValueError(f"unknown similarity mode {mode!r}")
        cand = np.stack([c.candidates for c in part])
        yield np.take_along_axis(m @ P.T, cand, axis=1)


def evaluate(params: ModelParams, enriched_products, cases: list[EvalCase], queries,
             mode: str = "dot", fingerprint: str = "", chunk: int = 512) -> EvalReport:
    """Rank each case's pool with the model and aggregate the metrics."""
    if not cases:
        return EvalReport({k: 0.0 for k in CUTOFFS}, np.zeros(0, dtype=np.int64), [], fingerprint)
    ranks = []
    for i, scores in enumerate(case_scores(params, enriched_products, cases, queries, mode, chunk)):
        part = cases[i * chunk:(i + 1) * chunk]
        cand = np.stack([c.candidates for c in part])
        targets = np.array([c.target for c in part])
        ranks.append(target_ranks(scores, cand, targets))
    ranks = np.concatenate(ranks)
    return EvalReport(aggregate(ranks), ranks, cases, fingerprint)


def evaluate_scores(score_fn, cases: list[EvalCase]) -> EvalReport:
    """Evaluate an arbitrary scorer ``score_fn(case) -> scores aligned with candidates``."""
    ranks = np.array([target_ranks(np.asarray(score_fn(c))[None, :], c.candidates[None, :],
                                   np.array([c.target]))[0] for c in cases], dtype=np.int64)
    return EvalReport(aggregate(ranks), ranks, cases)
