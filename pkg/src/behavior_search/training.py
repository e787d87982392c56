"""Joint retrieval + language-model training with negative sampling and ADAM."""
from __future__ import annotations

import csv
import logging
import time
import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .evaluation import build_cases, evaluate, query_matrix
from .graph import BehaviorGraph, PropagationConfig, jumping_backward, jumping_propagate
from .model import ModelParams, batch_forward, init_params, pad

logger = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """Non-finite loss; ``last_good`` holds the parameters before the failing step."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    batch_size: int = 1024
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    k_w: int = 5
    k_i: int = 2
    epochs: int = 20
    patience: int = 5
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    seed: int = 0
    f_mode: str = "dot"
    d: int = 64
    d_a: int = 8
    lam: float = 0.5
    history_cap: int = 20
    train_sequences: bool = True
    pool_size: int = 1000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.k_w < 0 or self.k_i < 0:
            raise ValueError("negative sampling rates must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.f_mode not in ("dot", "cosine"):
            raise ValueError(f"unknown f_mode {self.f_mode!r}")


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one subsystem, derived from the root seed."""
    return np.random.default_rng([seed, zlib.crc32(label.encode())])


# ---------------------------------------------------------------------------
# negative sampling


def _alias_table(p: np.ndarray):
    """Vose's alias method: O(n) build, O(1) draws."""
    n = len(p)
    scaled = p * n
    prob = np.zeros(n)
    alias = np.zeros(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s, g = small.pop(), large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = scaled[g] + scaled[s] - 1.0
        (small if scaled[g] < 1.0 else large).append(g)
    for i in large + small:
        prob[i] = 1.0
    return prob, alias


@dataclass
class NegativeSampler:
    word_probs: np.ndarray
    products: np.ndarray
    max_retries: int = 10

    def __post_init__(self):
        self._prob, self._alias = _alias_table(self.word_probs)

    def words(self, size, rng) -> np.ndarray:
        col = rng.integers(0, len(self._prob), size=size)
        keep = rng.random(size) < self._prob[col]
        return np.where(keep, col, self._alias[col])

    def product_draws(self, size, rng) -> np.ndarray:
        return self.products[rng.integers(0, len(self.products), size=size)]

    def negatives(self, positives: np.ndarray, k: int, kind: str, rng):
        """``k`` negatives per positive; collisions are redrawn, then masked out."""
        draw = self.words if kind == "word" else self.product_draws
        n = len(positives)
        neg = draw((n, k), rng)
        clash = neg == positives[:, None]
        for _ in range(self.max_retries):
            if not clash.any():
                break
            neg[clash] = draw(int(clash.sum()), rng)
            clash = neg == positives[:, None]
        return neg, ~clash


def build_sampler(vocab_counts, train_products, seed: int = 0) -> NegativeSampler:
    """Words ~ unigram^(3/4); products uniform over the training set."""
    counts = np.asarray(vocab_counts, dtype=np.float64)
    if counts.size == 0:
        raise ValueError("empty vocabulary")
    p = counts ** 0.75
    return NegativeSampler(p / p.sum(), np.asarray(train_products, dtype=np.int64))


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def nce_loss(positive_score, negative_scores=()) -> float:
    """``-[log s(pos) + sum log s(-neg)]`` with a stable logistic."""
    neg = np.asarray(negative_scores, dtype=np.float64)
    return float(-log_sigmoid(float(positive_score)) - np.sum(log_sigmoid(-neg)))


# ---------------------------------------------------------------------------
# triples and batches


@dataclass
class TrainTriple:
    user_id: str
    product: int
    query: int
    word: int
    timestamp: int


@dataclass
class TripleSet:
    users: list[str]
    products: np.ndarray
    timestamps: np.ndarray
    histories: list[tuple[int, ...]]
    product_queries: dict[int, list[int]]
    word_flat: np.ndarray
    word_offsets: np.ndarray
    word_counts: np.ndarray

    def __len__(self):
        return len(self.products)

    def sample_words(self, idx, rng) -> tuple[np.ndarray, np.ndarray]:
        p = self.products[idx]
        n = self.word_counts[p]
        has = n > 0
        pick = self.word_offsets[p] + np.floor(rng.random(len(idx)) * np.maximum(n, 1)).astype(np.int64)
        pick = np.minimum(pick, max(len(self.word_flat) - 1, 0))
        words = self.word_flat[pick] if len(self.word_flat) else np.zeros(len(idx), dtype=np.int64)
        return np.where(has, words, 0), has

    def sample_queries(self, idx, rng) -> np.ndarray:
        out = np.empty(len(idx), dtype=np.int64)
        for j, i in enumerate(idx):
            qs = self.product_queries[int(self.products[i])]
            out[j] = qs[rng.integers(len(qs))] if len(qs) > 1 else qs[0]
        return out

    def triples(self, idx, words, queries) -> list[TrainTriple]:
        return [TrainTriple(self.users[i], int(self.products[i]), int(q), int(w), int(self.timestamps[i]))
                for i, w, q in zip(idx, words, queries)]


def build_triples(split, product_queries, product_words, history_cap: int = 20) -> TripleSet:
    """One retrieval triple per training purchase whose product has a query.

    The history of a triple holds the user's distinct earlier purchases
    (strictly earlier timestamps), most recent first.
    """
    users, products, stamps, hists = [], [], [], []
    for user in sorted(split.history):
        seen: list[tuple[int, int]] = []
        for seq in split.history[user]:
            for it in seq.interactions:
                if product_queries.get(it.product):
                    h: list[int] = []
                    for p, ts in reversed(seen):
                        if ts < it.timestamp and p not in h:
                            h.append(p)
                            if len(h) == history_cap:
                                break
                    users.append(user)
                    products.append(it.product)
                    stamps.append(it.timestamp)
                    hists.append(tuple(h))
                seen.append((it.product, it.timestamp))
    counts = np.array([len(w) for w in product_words], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    flat = np.concatenate(product_words) if len(product_words) else np.zeros(0, dtype=np.int64)
    return TripleSet(users, np.array(products, dtype=np.int64), np.array(stamps, dtype=np.int64), hists,
                     product_queries, flat.astype(np.int64), offsets, counts)


@dataclass
class Batch:
    products: np.ndarray
    q_tok: np.ndarray
    q_mask: np.ndarray
    hist: np.ndarray
    h_mask: np.ndarray
    words: np.ndarray
    w_mask: np.ndarray
    neg_products: np.ndarray
    np_mask: np.ndarray
    neg_words: np.ndarray
    nw_mask: np.ndarray


def make_batch(triples: TripleSet, idx, words, w_mask, queries, q_matrix, sampler, config, rng) -> Batch:
    products = triples.products[idx]
    q_tok, q_mask = q_matrix[0][queries], q_matrix[1][queries]
    hist, h_mask = pad([triples.histories[i] for i in idx])
    neg_p, np_mask = sampler.negatives(products, config.k_i, "product", rng)
    neg_w, nw_mask = sampler.negatives(words, config.k_w, "word", rng)
    nw_mask &= w_mask[:, None]
    return Batch(products, q_tok, q_mask, hist, h_mask, words, w_mask, neg_p, np_mask, neg_w, nw_mask)


# ---------------------------------------------------------------------------
# loss and analytic gradients


def scatter_rows(out: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
    """``out[idx[j]] += vals[j]`` with repeated indices accumulated (sparse product)."""
    idx = idx.ravel()
    if idx.size == 0:
        return
    vals = vals.reshape(idx.size, -1)
    sel = sp.csr_matrix((np.ones(idx.size, dtype=vals.dtype), (idx, np.arange(idx.size))),
                        shape=(out.shape[0], idx.size))
    out += sel @ vals


def _sim_and_grads(a, b, mode, eps=1e-12):
    """``f(a, b)`` along the last axis with its partials w.r.t. ``a`` and ``b``."""
    dot = np.sum(a * b, axis=-1)
    if mode == "dot":
        return dot, b, a
    na = np.maximum(np.linalg.norm(a, axis=-1), eps)[..., None]
    nb = np.maximum(np.linalg.norm(b, axis=-1), eps)[..., None]
    f = dot / (na[..., 0] * nb[..., 0])
    da = b / (na * nb) - f[..., None] * a / na ** 2
    db = a / (na * nb) - f[..., None] * b / nb ** 2
    return f, da, db


def loss_and_grads(params: ModelParams, graph: BehaviorGraph, prop: PropagationConfig, batch: Batch,
                   mode: str = "dot", train_sequences: bool = True):
    """Mean per-triple retrieval and LM losses plus gradients for every tensor."""
    n = len(batch.products)
    P, Wd = params.products, params.words
    enriched = jumping_propagate(graph, params.node_embeddings(), prop).matrix[:graph.n_products]
    fc = batch_forward(params, enriched, batch.q_tok, batch.q_mask, batch.hist, batch.h_mask)
    g = {k: np.zeros_like(v) for k, v in params.tensors().items()}

    # retrieval: positive against k_i sampled products, raw product embeddings
    pos_vec = P[batch.products]
    neg_vec = P[batch.neg_products]
    f_pos, dpos_p, dpos_m = _sim_and_grads(pos_vec, fc.m, mode)
    f_neg, dneg_p, dneg_m = _sim_and_grads(neg_vec, fc.m[:, None, :], mode)
    loss_pr = -log_sigmoid(f_pos) - np.sum(np.where(batch.np_mask, log_sigmoid(-f_neg), 0.0), axis=1)
    c_pos = (expit(f_pos) - 1.0) / n
    c_neg = np.where(batch.np_mask, expit(f_neg), 0.0) / n
    P_rows = [batch.products, batch.neg_products.ravel()]
    P_vals = [c_pos[:, None] * dpos_p, (c_neg[..., None] * dneg_p).reshape(-1, P.shape[1])]
    dm = c_pos[:, None] * dpos_m + np.sum(c_neg[..., None] * dneg_m, axis=1)

    # language model: word vs k_w sampled words, tau = dot(word, product)
    w_pos = Wd[batch.words]
    w_neg = Wd[batch.neg_words]
    t_pos = np.sum(w_pos * pos_vec, axis=1)
    t_neg = np.einsum("nkd,nd->nk", w_neg, pos_vec)
    loss_lm = np.where(batch.w_mask, -log_sigmoid(t_pos), 0.0) \
        - np.sum(np.where(batch.nw_mask, log_sigmoid(-t_neg), 0.0), axis=1)
    ct_pos = np.where(batch.w_mask, expit(t_pos) - 1.0, 0.0) / n
    ct_neg = np.where(batch.nw_mask, expit(t_neg), 0.0) / n
    W_rows = [batch.words, batch.neg_words.ravel()]
    W_vals = [ct_pos[:, None] * pos_vec, (ct_neg[..., None] * pos_vec[:, None, :]).reshape(-1, P.shape[1])]
    P_rows.append(batch.products)
    P_vals.append(ct_pos[:, None] * w_pos + np.einsum("nk,nkd->nd", ct_neg, w_neg))

    # user-query mix
    lam = params.lam
    dq = lam * dm
    du = (1.0 - lam) * dm

    # zero attention: u = sum_h alpha_h e_h, the zero slot carries no vector
    alpha = fc.alpha
    d_hist = alpha[:, 1:, None] * du[:, None, :]
    d_alpha = np.concatenate([np.zeros((n, 1), dtype=du.dtype), np.einsum("nhd,nd->nh", fc.hist_vecs, du)], axis=1)
    d_logit = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=1, keepdims=True))
    d_logit[:, 1:] = np.where(batch.h_mask, d_logit[:, 1:], 0.0)
    d_hist += d_logit[:, 1:, None] * fc.r[:, None, :]
    dr = np.einsum("nh,nhd->nd", d_logit[:, 1:], fc.hist_vecs) + d_logit[:, :1] * params.zero_inquiry
    g["zero_inquiry"] += d_logit[:, 0] @ fc.r

    # r = tanh(W_f^T q + b_f) W_h
    g["att_h"] += np.einsum("nab,na->b", fc.T, dr)
    d_pre = dr[:, :, None] * params.att_h[None, None, :] * (1.0 - fc.T ** 2)
    g["att_b"] += d_pre.sum(axis=0)
    g["att_W"] += np.einsum("nab,nc->abc", d_pre, fc.q, optimize=True)
    dq = dq + np.einsum("abc,nab->nc", params.att_W, d_pre, optimize=True)

    # query = mean of its word embeddings
    counts = np.maximum(batch.q_mask.sum(axis=1, keepdims=True), 1)
    per_tok = np.broadcast_to((dq / counts)[:, None, :], batch.q_tok.shape + (dq.shape[1],))
    W_rows.append(batch.q_tok[batch.q_mask])
    W_vals.append(per_tok[batch.q_mask])
    scatter_rows(g["words"], np.concatenate(W_rows), np.concatenate(W_vals))

    # enriched history vectors flow back through the linear propagation
    if batch.h_mask.any():
        d_enriched = np.zeros((graph.n_nodes, P.shape[1]), dtype=P.dtype)
        scatter_rows(d_enriched, batch.hist[batch.h_mask], d_hist[batch.h_mask])
        d_h0 = jumping_backward(graph, d_enriched, prop)
        g["products"] += d_h0[:graph.n_products]
        if train_sequences:
            g["sequences"] += d_h0[graph.n_products:]
    scatter_rows(g["products"], np.concatenate(P_rows), np.concatenate(P_vals))

    return float(np.mean(loss_pr)), float(np.mean(loss_lm)), g


# ---------------------------------------------------------------------------
# optimizer and training loop


class Adam:
    def __init__(self, params: ModelParams, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors().items()}

    def update(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, grad in grads.items():
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            arr = getattr(params, name)
            arr -= step.astype(arr.dtype, copy=False)


def step(params, graph, batch, optimizer: Adam, config: TrainConfig, triples=None):
    """One ADAM update; returns losses and per-tensor gradient norms."""
    loss_pr, loss_lm, grads = loss_and_grads(params, graph, config.propagation, batch,
                                             config.f_mode, config.train_sequences)
    if not np.isfinite(loss_pr + loss_lm):
        culprit = triples[0] if triples else None
        raise TrainingDivergence(f"non-finite loss (pr={loss_pr}, lm={loss_lm}); first triple {culprit}")
    optimizer.update(params, grads)
    norms = {k: float(np.linalg.norm(v)) for k, v in grads.items()}
    return {"loss_pr": loss_pr, "loss_lm": loss_lm, "loss_total": loss_pr + loss_lm, "grad_norms": norms}


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    best_epoch: int


LOG_FIELDS = ("epoch", "loss_pr", "loss_lm", "val_hr10", "val_ndcg10", "val_mrr", "wall_seconds")


def write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) and k != "wall_seconds" else v)
                        for k, v in row.items()})


def train(corpus, graph: BehaviorGraph, config: TrainConfig, dtype=np.float32, log_path=None,
          val_cases=None, timing: bool = True) -> TrainResult:
    """Epoch loop with per-epoch validation; keeps the best-NDCG@10 parameters.

    Training stops after ``config.patience`` epochs without improvement.
    With a fixed seed and a single thread the result is bit-for-bit
    reproducible (set ``timing=False`` to also zero the wall-clock column).
    """
    split = corpus.split
    params = init_params(len(corpus.vocab), corpus.n_products, len(split.train), config.d, config.d_a,
                         config.lam, rng_for(config.seed, "init"), dtype)
    triples = build_triples(split, corpus.product_queries, corpus.product_words, config.history_cap)
    if len(triples) == 0:
        raise ValueError("no training triples")
    sampler = build_sampler(corpus.vocab.counts, split.train_products(), config.seed)
    q_matrix = query_matrix(corpus.queries)
    if val_cases is None:
        val_cases = build_cases(split, seed=config.seed, pool_size=config.pool_size, which="validation",
                                history_cap=config.history_cap) if split.validation else []
    opt = Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
    rng_shuffle = rng_for(config.seed, "shuffle")
    rng_text = rng_for(config.seed, "words")
    rng_neg = rng_for(config.seed, "negatives")

    best, best_score, best_epoch, stale = params.copy(), -np.inf, 0, 0
    log = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng_shuffle.permutation(len(triples))
        words, w_mask = triples.sample_words(order, rng_text)
        queries = triples.sample_queries(order, rng_text)
        tot_pr = tot_lm = 0.0
        for start in range(0, len(order), config.batch_size):
            sl = slice(start, start + config.batch_size)
            idx = order[sl]
            batch = make_batch(triples, idx, words[sl], w_mask[sl], queries[sl], q_matrix, sampler, config, rng_neg)
            try:
                out = step(params, graph, batch, opt, config, triples.triples(idx[:1], words[sl][:1], queries[sl][:1]))
            except TrainingDivergence as exc:
                exc.last_good = best
                raise
            tot_pr += out["loss_pr"] * len(idx)
            tot_lm += out["loss_lm"] * len(idx)

        row = {"epoch": epoch, "loss_pr": tot_pr / len(order), "loss_lm": tot_lm / len(order)}
        if val_cases:
            enriched = jumping_propagate(graph, params.node_embeddings(), config.propagation).matrix
            rep = evaluate(params, enriched[:corpus.n_products], val_cases, corpus.queries, config.f_mode)
            row.update(val_hr10=rep.metrics["HR@10"], val_ndcg10=rep.metrics["NDCG@10"],
                       val_mrr=rep.metrics["MRR@100"])
            score = rep.metrics["NDCG@10"]
        else:
            row.update(val_hr10=0.0, val_ndcg10=0.0, val_mrr=0.0)
            score = -row["loss_pr"]
        row["wall_seconds"] = round(time.perf_counter() - t0, 3) if timing else 0.0
        log.append(row)
        logger.info("epoch %d loss_pr=%.4f loss_lm=%.4f val_ndcg10=%.4f", epoch, row["loss_pr"],
                    row["loss_lm"], row["val_ndcg10"])

        if score > best_score:
            best, best_score, best_epoch, stale = params.copy(), score, epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    if log_path is not None:
        write_log(log, log_path)
    return TrainResult(best, log, best_epoch)
