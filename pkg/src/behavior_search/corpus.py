"""Review ingestion, vocabulary/query construction, sequence segmentation and splits."""
from __future__ import annotations

import gzip
import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

DAY = 86400
WEEK = 7 * DAY
DURATIONS = {
    "day": DAY,
    "week": WEEK,
    "month": 30 * DAY,
    "quarter": 91 * DAY,
    "year": 365 * DAY,
}

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


class CorpusError(ValueError):
    """Raised when input data cannot be turned into a usable corpus."""


@dataclass(frozen=True)
class ReviewRecord:
    user_id: str
    product_id: str
    timestamp: int
    review_text: str
    category_path: tuple[str, ...]

    def __post_init__(self):
        if not self.user_id or not self.product_id:
            raise CorpusError("user_id and product_id must be non-empty")
        if self.timestamp < 0:
            raise CorpusError(f"negative timestamp {self.timestamp}")


@dataclass
class Vocabulary:
    tokens: list[str]
    counts: np.ndarray
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def encode(self, tokens: Iterable[str]) -> list[int]:
        """Map tokens to indices, dropping out-of-vocabulary ones."""
        return [self.index[t] for t in tokens if t in self.index]


@dataclass(frozen=True)
class Query:
    query_id: int
    token_indices: tuple[int, ...]
    source_category: str


class Interaction(NamedTuple):
    product: int
    timestamp: int
    query: int  # -1 when the product has no usable category query


@dataclass
class SuccessiveSequence:
    seq_id: int
    user_id: str
    interactions: list[Interaction]

    @property
    def start_time(self) -> int:
        return self.interactions[0].timestamp

    @property
    def end_time(self) -> int:
        return self.interactions[-1].timestamp

    @property
    def products(self) -> list[int]:
        return [it.product for it in self.interactions]


@dataclass
class DatasetSplit:
    train: list[SuccessiveSequence]
    validation: list[SuccessiveSequence]
    test: list[SuccessiveSequence]
    history: dict[str, list[SuccessiveSequence]]

    def train_products(self) -> np.ndarray:
        seen = {it.product for s in self.train for it in s.interactions}
        return np.array(sorted(seen), dtype=np.int64)


# ---------------------------------------------------------------------------
# ingestion


def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


def _parse_path(value) -> tuple[str, ...]:
    if isinstance(value, str):
        parts = value.split(">") if value else []
    elif isinstance(value, (list, tuple)):
        parts = [str(v) for v in value]
    else:
        raise CorpusError("category_path must be a string or list")
    return tuple(p.strip() for p in parts if p.strip())


def _parse_timestamp(value) -> int:
    if isinstance(value, bool):
        raise CorpusError("boolean timestamp")
    if isinstance(value, str):
        value = value.strip()
        if not value:
            raise CorpusError("missing timestamp")
    ts = float(value)
    if not np.isfinite(ts) or ts < 0:
        raise CorpusError(f"bad timestamp {value!r}")
    if ts != int(ts):
        raise CorpusError(f"non-integer timestamp {value!r}")
    return int(ts)


def _record_from_fields(user, product, ts, path, text) -> ReviewRecord:
    if not isinstance(text, str):
        raise CorpusError("review_text must be a string")
    return ReviewRecord(
        user_id=str(user).strip(),
        product_id=str(product).strip(),
        timestamp=_parse_timestamp(ts),
        review_text=text,
        category_path=_parse_path(path),
    )


def ingest(path, fmt: str | None = None, max_bad_lines: int = 100):
    """Read review records from a TSV or JSON-lines file.

    TSV columns are ``user_id, product_id, timestamp, category_path, review_text``
    with the category path joined by ``>``. JSON-lines objects use the same
    field names (``category_path`` may be a list).

    Returns ``(records, bad_lines)`` where ``bad_lines`` is a list of
    ``(line_number, reason)``. Raises :class:`CorpusError` when the file is
    unreadable or more than ``max_bad_lines`` lines are malformed.
    """
    path = Path(path)
    if fmt is None:
        fmt = "jsonl" if ".json" in path.name else "tsv"
    if fmt not in ("tsv", "jsonl"):
        raise CorpusError(f"unknown input format {fmt!r}")
    try:
        handle = _open_text(path)
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc

    records: list[ReviewRecord] = []
    bad: list[tuple[int, str]] = []
    with handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            try:
                if fmt == "tsv":
                    cols = line.split("\t")
                    if len(cols) != 5:
                        raise CorpusError(f"expected 5 columns, got {len(cols)}")
                    rec = _record_from_fields(*cols)
                else:
                    obj = json.loads(line)
                    rec = _record_from_fields(
                        obj["user_id"], obj["product_id"], obj["timestamp"],
                        obj["category_path"], obj["review_text"],
                    )
            except (CorpusError, ValueError, KeyError, TypeError) as exc:
                bad.append((lineno, str(exc)))
                continue
            records.append(rec)

    if bad:
        logger.warning("%s: %d malformed line(s) rejected", path, len(bad))
    if len(bad) > max_bad_lines:
        where = ", ".join(str(n) for n, _ in bad[:20])
        raise CorpusError(
            f"{path}: {len(bad)} malformed lines exceed max_bad_lines={max_bad_lines} (lines {where})"
        )
    return records, bad


def write_tsv(records: Iterable[ReviewRecord], path) -> None:
    """Write records in the TSV layout read by :func:`ingest`."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            text = r.review_text.replace("\t", " ").replace("\n", " ")
            fh.write(f"{r.user_id}\t{r.product_id}\t{r.timestamp}\t{'>'.join(r.category_path)}\t{text}\n")


def load_amazon(reviews_path, meta_path) -> list[ReviewRecord]:
    """Convert a raw Amazon review dump plus its metadata file into records.

    The review file carries ``reviewerID, asin, unixReviewTime, reviewText``;
    categories come from the metadata ``category`` (or ``categories``) field.
    """
    categories: dict[str, tuple[str, ...]] = {}
    with _open_text(Path(meta_path)) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            cats = obj.get("category") or obj.get("categories") or []
            if cats and isinstance(cats[0], list):
                cats = cats[0]
            categories[obj["asin"]] = tuple(c for c in cats if isinstance(c, str))

    records = []
    with _open_text(Path(reviews_path)) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            text = " ".join(filter(None, [obj.get("summary", ""), obj.get("reviewText", "")]))
            try:
                records.append(ReviewRecord(
                    user_id=obj["reviewerID"], product_id=obj["asin"],
                    timestamp=int(obj["unixReviewTime"]), review_text=text,
                    category_path=categories.get(obj["asin"], ()),
                ))
            except (KeyError, CorpusError, ValueError):
                continue
    return records


def kcore_filter(records: list[ReviewRecord], k: int = 5) -> list[ReviewRecord]:
    """Iteratively keep only users and products with at least ``k`` records."""
    while True:
        users = Counter(r.user_id for r in records)
        products = Counter(r.product_id for r in records)
        kept = [r for r in records if users[r.user_id] >= k and products[r.product_id] >= k]
        if len(kept) == len(records):
            return kept
        records = kept


# ---------------------------------------------------------------------------
# text


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def _record_tokens(rec: ReviewRecord) -> list[str]:
    return tokenize(rec.review_text) + tokenize(" ".join(rec.category_path))


def build_vocabulary(records: Iterable[ReviewRecord], min_count: int = 5) -> Vocabulary:
    """Count review and category tokens; keep those seen at least ``min_count`` times.

    Tokens are ordered by descending frequency, then alphabetically.
    """
    if min_count < 1:
        raise CorpusError("min_count must be >= 1")
    counts = Counter()
    for rec in records:
        counts.update(_record_tokens(rec))
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    if not kept:
        raise CorpusError(f"empty vocabulary at min_count={min_count}")
    return Vocabulary(kept, np.array([counts[t] for t in kept], dtype=np.int64))


def query_tokens(category_path: Iterable[str]) -> list[str]:
    """Concatenate category terms root to leaf, tokenized, first occurrence kept."""
    seen = []
    for tok in tokenize(" ".join(category_path)):
        if tok not in seen:
            seen.append(tok)
    return seen


def product_index(records: Iterable[ReviewRecord]) -> dict[str, int]:
    return {p: i for i, p in enumerate(sorted({r.product_id for r in records}))}


def extract_queries(records, vocab: Vocabulary, products: dict[str, int]):
    """Turn distinct category paths into deduplicated queries.

    Returns ``(queries, product_queries, path_query)``: ``product_queries``
    maps each product index to the sorted query ids it was listed under and
    ``path_query`` maps a category path to its query id. Paths whose tokens
    are all out of vocabulary produce no query.
    """
    queries: list[Query] = []
    by_tokens: dict[tuple[int, ...], int] = {}
    path_query: dict[tuple[str, ...], int] = {}
    product_queries: dict[int, set[int]] = defaultdict(set)

    for path in sorted({r.category_path for r in records}):
        if not path:
            continue
        toks = tuple(vocab.encode(query_tokens(path)))
        if not toks:
            continue
        qid = by_tokens.get(toks)
        if qid is None:
            qid = len(queries)
            by_tokens[toks] = qid
            queries.append(Query(qid, toks, ">".join(path)))
        path_query[path] = qid

    for rec in records:
        qid = path_query.get(rec.category_path)
        if qid is not None:
            product_queries[products[rec.product_id]].add(qid)
    return queries, {p: sorted(q) for p, q in product_queries.items()}, path_query


# ---------------------------------------------------------------------------
# sequences and splits


def _sort_key(rec: ReviewRecord):
    return rec.timestamp, rec.product_id


def segment_sequences(records, R: int, products: dict[str, int] | None = None,
                      path_query: dict | None = None) -> list[SuccessiveSequence]:
    """Cut each user's chronological history wherever the gap exceeds ``R`` seconds.

    Sequence ids are assigned by user id, then by time.
    """
    if R <= 0:
        raise CorpusError("R must be positive")
    products = products if products is not None else product_index(records)
    path_query = path_query or {}

    by_user: dict[str, list[ReviewRecord]] = defaultdict(list)
    for rec in records:
        by_user[rec.user_id].append(rec)

    sequences: list[SuccessiveSequence] = []
    for user in sorted(by_user):
        current: list[Interaction] = []
        last_ts = None
        for rec in sorted(by_user[user], key=_sort_key):
            if last_ts is not None and rec.timestamp - last_ts > R:
                sequences.append(SuccessiveSequence(len(sequences), user, current))
                current = []
            current.append(Interaction(products[rec.product_id], rec.timestamp,
                                       path_query.get(rec.category_path, -1)))
            last_ts = rec.timestamp
        sequences.append(SuccessiveSequence(len(sequences), user, current))
    return sequences


def resegment(sequences: list[SuccessiveSequence], R: int) -> list[SuccessiveSequence]:
    """Apply the gap rule to already-built sequences (used to check idempotence)."""
    out = []
    for seq in sequences:
        current = [seq.interactions[0]]
        for prev, it in zip(seq.interactions, seq.interactions[1:]):
            if it.timestamp - prev.timestamp > R:
                out.append(SuccessiveSequence(len(out), seq.user_id, current))
                current = []
            current.append(it)
        out.append(SuccessiveSequence(len(out), seq.user_id, current))
    return out


def split(sequences: list[SuccessiveSequence]) -> DatasetSplit:
    """Chronological per-user split: last sequence test, second last validation.

    Users with two sequences get no validation sequence; users with one are
    train-only. Validation/test interactions on products never seen in
    training are dropped, which can leave an evaluation sequence empty.
    """
    by_user: dict[str, list[SuccessiveSequence]] = defaultdict(list)
    for seq in sequences:
        by_user[seq.user_id].append(seq)

    train, val, test = [], [], []
    history = {}
    for user in sorted(by_user):
        seqs = sorted(by_user[user], key=lambda s: (s.start_time, s.seq_id))
        if len(seqs) >= 3:
            train_part, val_part, test_part = seqs[:-2], [seqs[-2]], [seqs[-1]]
        elif len(seqs) == 2:
            train_part, val_part, test_part = seqs[:1], [], [seqs[1]]
        else:
            train_part, val_part, test_part = seqs, [], []
        train.extend(train_part)
        val.extend(val_part)
        test.extend(test_part)
        history[user] = train_part

    seen = {it.product for s in train for it in s.interactions}

    def keep_known(seqs):
        return [SuccessiveSequence(s.seq_id, s.user_id,
                                   [it for it in s.interactions if it.product in seen])
                for s in seqs]

    val, test = keep_known(val), keep_known(test)
    if not any(s.interactions for s in test):
        raise CorpusError("no test interactions left after splitting; nothing to evaluate")
    return DatasetSplit(train, val, test, history)


# ---------------------------------------------------------------------------
# prepared corpus bundle


@dataclass
class PreparedCorpus:
    vocab: Vocabulary
    queries: list[Query]
    product_ids: list[str]
    product_queries: dict[int, list[int]]
    product_words: list[np.ndarray]
    sequences: list[SuccessiveSequence]
    split: DatasetSplit

    @property
    def n_products(self) -> int:
        return len(self.product_ids)

    def users(self) -> list[str]:
        return sorted(self.split.history)

    def stats(self) -> dict[str, int]:
        from .graph import build_graph

        graph = build_graph(self.split.train, self.n_products)
        return {
            "reviews": sum(len(s.interactions) for s in self.sequences),
            "user": len(self.split.history),
            "query": len(self.queries),
            "product": self.n_products,
            "seq": len(self.sequences),
            "train_seq": len(self.split.train),
            "edge": graph.n_edges,
            "vocab": len(self.vocab),
        }


def prepare_corpus(records: list[ReviewRecord], R: int = WEEK, min_count: int = 5) -> PreparedCorpus:
    """Run vocabulary, query extraction, segmentation and splitting on records."""
    vocab = build_vocabulary(records, min_count)
    products = product_index(records)
    queries, product_queries, path_query = extract_queries(records, vocab, products)
    sequences = segment_sequences(records, R, products, path_query)
    ds = split(sequences)

    # product text comes from training purchases only
    train_keys = {(s.user_id, it.product, it.timestamp) for s in ds.train for it in s.interactions}
    words: dict[int, list[int]] = defaultdict(list)
    for rec in sorted(records, key=lambda r: (r.user_id, r.timestamp, r.product_id)):
        pid = products[rec.product_id]
        if (rec.user_id, pid, rec.timestamp) in train_keys:
            words[pid].extend(vocab.encode(tokenize(rec.review_text)))
    product_words = [np.array(words.get(i, []), dtype=np.int64) for i in range(len(products))]
    return PreparedCorpus(vocab, queries, sorted(products, key=products.get),
                          product_queries, product_words, sequences, ds)


def _format_seq(seq: SuccessiveSequence) -> str:
    triples = ",".join(f"{it.product}:{it.timestamp}:{it.query}" for it in seq.interactions)
    return f"{seq.seq_id}\t{seq.user_id}\t{triples}"


def _parse_seq(line: str) -> SuccessiveSequence:
    sid, user, triples = line.rstrip("\n").split("\t")
    inter = []
    for t in filter(None, triples.split(",")):
        p, ts, q = t.split(":")
        inter.append(Interaction(int(p), int(ts), int(q)))
    return SuccessiveSequence(int(sid), user, inter)


def save_corpus(corpus: PreparedCorpus, out_dir) -> None:
    """Write the prepared corpus as line-oriented text files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "vocab.tsv", "w") as fh:
        for tok, cnt in zip(corpus.vocab.tokens, corpus.vocab.counts):
            fh.write(f"{tok}\t{int(cnt)}\n")
    with open(out / "queries.tsv", "w") as fh:
        for q in corpus.queries:
            fh.write(f"{q.query_id}\t{' '.join(map(str, q.token_indices))}\t{q.source_category}\n")
    with open(out / "products.tsv", "w") as fh:
        for i, pid in enumerate(corpus.product_ids):
            qs = " ".join(map(str, corpus.product_queries.get(i, [])))
            ws = " ".join(map(str, corpus.product_words[i].tolist()))
            fh.write(f"{i}\t{pid}\t{qs}\t{ws}\n")
    with open(out / "sequences.tsv", "w") as fh:
        for seq in corpus.sequences:
            fh.write(_format_seq(seq) + "\n")

    ds = corpus.split
    with open(out / "split.tsv", "w") as fh:
        for name, seqs in (("train", ds.train), ("validation", ds.validation), ("test", ds.test)):
            for s in seqs:
                kept = "" if name == "train" else ",".join(
                    f"{it.product}:{it.timestamp}" for it in s.interactions)
                fh.write(f"{name}\t{s.seq_id}\t{kept}\n")


def load_corpus(in_dir) -> PreparedCorpus:
    src = Path(in_dir)
    tokens, counts = [], []
    with open(src / "vocab.tsv") as fh:
        for line in fh:
            tok, cnt = line.rstrip("\n").split("\t")
            tokens.append(tok)
            counts.append(int(cnt))
    vocab = Vocabulary(tokens, np.array(counts, dtype=np.int64))

    queries = []
    with open(src / "queries.tsv") as fh:
        for line in fh:
            qid, toks, cat = line.rstrip("\n").split("\t")
            queries.append(Query(int(qid), tuple(int(t) for t in toks.split()), cat))

    product_ids, product_queries, product_words = [], {}, []
    with open(src / "products.tsv") as fh:
        for line in fh:
            idx, pid, qs, ws = line.rstrip("\n").split("\t")
            product_ids.append(pid)
            if qs:
                product_queries[int(idx)] = [int(q) for q in qs.split()]
            product_words.append(np.array([int(w) for w in ws.split()], dtype=np.int64))

    with open(src / "sequences.tsv") as fh:
        sequences = [_parse_seq(line) for line in fh if line.strip()]
    by_id = {s.seq_id: s for s in sequences}

    parts = {"train": [], "validation": [], "test": []}
    with open(src / "split.tsv") as fh:
        for line in fh:
            name, sid, kept = line.rstrip("\n").split("\t")
            seq = by_id[int(sid)]
            if name != "train":
                keep = {tuple(map(int, k.split(":"))) for k in filter(None, kept.split(","))}
                seq = SuccessiveSequence(seq.seq_id, seq.user_id,
                                         [it for it in seq.interactions if (it.product, it.timestamp) in keep])
            parts[name].append(seq)
    history = defaultdict(list)
    for s in parts["train"]:
        history[s.user_id].append(s)
    for s in parts["validation"] + parts["test"]:
        history.setdefault(s.user_id, [])
    ds = DatasetSplit(parts["train"], parts["validation"], parts["test"], dict(history))
    return PreparedCorpus(vocab, queries, product_ids, product_queries, product_words, sequences, ds)
