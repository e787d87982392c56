"""Latent-space search model: query encoder, zero attention over enriched history, scoring."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TENSORS = ("words", "products", "sequences", "att_W", "att_b", "att_h", "zero_inquiry")


@dataclass
class ModelParams:
    """All trainable tensors plus the fixed user/query balance ``lam``.

    ``att_W`` has shape ``(d, d_a, d)``: its last axis contracts with the
    query, giving a ``(d, d_a)`` matrix that maps an item vector to ``d_a``
    hidden units.
    """

    words: np.ndarray
    products: np.ndarray
    sequences: np.ndarray
    att_W: np.ndarray
    att_b: np.ndarray
    att_h: np.ndarray
    zero_inquiry: np.ndarray
    lam: float = 0.5

    def __post_init__(self):
        d = self.dim
        expected = {
            "words": (None, d), "products": (None, d), "sequences": (None, d),
            "att_W": (d, self.att_dim, d), "att_b": (d, self.att_dim),
            "att_h": (self.att_dim,), "zero_inquiry": (d,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.ndim != len(shape) or any(s is not None and s != a for s, a in zip(shape, arr.shape)):
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")

    @property
    def dim(self) -> int:
        return self.products.shape[1]

    @property
    def att_dim(self) -> int:
        return self.att_h.shape[0]

    @property
    def n_products(self) -> int:
        return self.products.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSORS}

    def node_embeddings(self) -> np.ndarray:
        """Graph input: product rows followed by sequence rows."""
        return np.concatenate([self.products, self.sequences], axis=0)

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.tensors().items()}, lam=self.lam)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors().values())


def init_params(n_words, n_products, n_sequences, d=64, d_a=8, lam=0.5, rng=None,
                dtype=np.float32) -> ModelParams:
    """Embeddings uniform in +-0.5/d, attention tensors uniform in +-1/sqrt(d), zero inquiry at 0."""
    rng = rng if rng is not None else np.random.default_rng(0)
    e, a = 0.5 / d, 1.0 / np.sqrt(d)

    def u(scale, *shape):
        return rng.uniform(-scale, scale, size=shape).astype(dtype)

    return ModelParams(
        words=u(e, n_words, d), products=u(e, n_products, d), sequences=u(e, n_sequences, d),
        att_W=u(a, d, d_a, d), att_b=u(a, d, d_a), att_h=u(a, d_a),
        zero_inquiry=np.zeros(d, dtype=dtype), lam=lam,
    )


@dataclass(frozen=True)
class UserContext:
    user_id: str
    history: tuple[int, ...]  # most recent first
    query_id: int


def evaluation_history(train_sequences, cap: int = 20) -> tuple[int, ...]:
    """Products of the latest training sequence, backfilled from earlier ones, most recent first."""
    out: list[int] = []
    for seq in reversed(train_sequences):
        for it in reversed(seq.interactions):
            if it.product not in out:
                out.append(it.product)
                if len(out) == cap:
                    return tuple(out)
    return tuple(out)


# ---------------------------------------------------------------------------
# single-example operations


def encode_query(params: ModelParams, token_indices) -> np.ndarray:
    idx = np.asarray(token_indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cannot encode an empty query")
    return params.words[idx].mean(axis=0)


def attention_projection(params: ModelParams, q_vec) -> np.ndarray:
    """``tanh(W_f^T q + b_f) @ W_h``: a d-vector whose dot with an item gives its score."""
    T = np.tanh(np.einsum("abc,c->ab", params.att_W, q_vec) + params.att_b)
    return T @ params.att_h


def attention_score(params: ModelParams, q_vec, item_vec) -> float:
    return float(np.dot(item_vec, attention_projection(params, q_vec)))


def _softmax(x):
    z = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def attention_weights(params: ModelParams, enriched_products, history, q_vec) -> np.ndarray:
    """Softmax over the zero slot (index 0) followed by each history item."""
    r = attention_projection(params, q_vec)
    hist = np.asarray(history, dtype=np.int64)
    scores = np.concatenate([[params.zero_inquiry @ r], enriched_products[hist] @ r])
    return _softmax(scores)


def user_vector(params: ModelParams, enriched_products, history, q_vec) -> np.ndarray:
    hist = np.asarray(history, dtype=np.int64)
    if hist.size == 0:
        return np.zeros(params.dim, dtype=params.products.dtype)
    alpha = attention_weights(params, enriched_products, hist, q_vec)
    return alpha[1:] @ enriched_products[hist]


def mix(lam: float, u_vec, q_vec) -> np.ndarray:
    return lam * np.asarray(q_vec) + (1.0 - lam) * np.asarray(u_vec)


def similarity(a, b, mode: str = "dot", eps: float = 1e-12):
    """Row-wise ``f(a, b)`` over the last axis."""
    dot = np.sum(a * b, axis=-1)
    if mode == "dot":
        return dot
    if mode == "cosine":
        return dot / (np.maximum(np.linalg.norm(a, axis=-1), eps) * np.maximum(np.linalg.norm(b, axis=-1), eps))
    raise ValueError(f"unknown similarity mode {mode!r}")


def score_product(params: ModelParams, m_uq, product_index: int, mode: str = "dot") -> float:
    """Score with the raw product embedding; enriched vectors only ever describe users."""
    return float(similarity(params.products[product_index], m_uq, mode))


def rank(params: ModelParams, enriched_products, ctx: UserContext, candidates, queries,
         mode: str = "dot") -> list[tuple[int, float]]:
    """Candidates by descending score, ties broken by ascending product index."""
    if len(candidates) == 0:
        raise ValueError("no candidates to rank")
    q = encode_query(params, queries[ctx.query_id].token_indices)
    m = mix(params.lam, user_vector(params, enriched_products, ctx.history, q), q)
    scored = [(int(c), score_product(params, m, int(c), mode)) for c in candidates]
    return sorted(scored, key=lambda t: (-t[1], t[0]))


# ---------------------------------------------------------------------------
# batched forward pass shared by training and evaluation


def pad(rows, fill=0):
    """Pad ragged integer rows into ``(values, mask)`` arrays."""
    width = max((len(r) for r in rows), default=0)
    width = max(width, 1)
    values = np.full((len(rows), width), fill, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        values[i, :len(r)] = r
        mask[i, :len(r)] = True
    return values, mask


@dataclass
class ForwardCache:
    q: np.ndarray
    T: np.ndarray
    r: np.ndarray
    hist_vecs: np.ndarray
    alpha: np.ndarray
    u: np.ndarray
    m: np.ndarray


def batch_forward(params: ModelParams, enriched_products, q_tok, q_mask, hist, h_mask) -> ForwardCache:
    """Query encodings, attention and user-query mix for a batch."""
    counts = q_mask.sum(axis=1, keepdims=True)
    q = (params.words[q_tok] * q_mask[..., None]).sum(axis=1) / np.maximum(counts, 1)
    q = q.astype(params.products.dtype, copy=False)
    # tanh(W_f^T q + b_f) is computed once per example and shared by its whole history
    T = np.tanh(np.einsum("abc,nc->nab", params.att_W, q, optimize=True) + params.att_b)
    r = T @ params.att_h
    hist_vecs = enriched_products[hist]
    scores = np.einsum("nhd,nd->nh", hist_vecs, r)
    scores = np.where(h_mask, scores, -np.inf)
    zero = (r @ params.zero_inquiry)[:, None]
    logits = np.concatenate([zero, scores], axis=1)
    alpha = _softmax(logits)
    u = np.einsum("nh,nhd->nd", alpha[:, 1:], hist_vecs)
    m = params.lam * q + (1.0 - params.lam) * u
    return ForwardCache(q, T, r, hist_vecs, alpha, u, m)


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def save_checkpoint(params: ModelParams, out_dir, config: dict | None = None) -> Path:
    """Write a JSON manifest plus one little-endian float32 blob per tensor."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "d": params.dim, "d_a": params.att_dim, "lam": params.lam,
        "n_words": params.words.shape[0], "n_products": params.n_products,
        "n_sequences": params.sequences.shape[0],
        "config_hash": config_hash(config or {}),
        "tensors": {name: list(arr.shape) for name, arr in params.tensors().items()},
    }
    for name, arr in params.tensors().items():
        np.ascontiguousarray(arr, dtype="<f4").tofile(out / f"{name}.f32")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(in_dir) -> tuple[ModelParams, dict]:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    arrays = {}
    for name in TENSORS:
        shape = tuple(manifest["tensors"][name])
        flat = np.fromfile(src / f"{name}.f32", dtype="<f4")
        if flat.size != int(np.prod(shape)):
            raise ValueError(f"{name}: blob holds {flat.size} values, manifest expects shape {shape}")
        arrays[name] = flat.reshape(shape).astype(np.float32)
    params = ModelParams(**arrays, lam=manifest["lam"])
    if params.dim != manifest["d"] or params.att_dim != manifest["d_a"]:
        raise ValueError("checkpoint tensors disagree with manifest dimensions")
    return params, manifest
