"""Synthetic review corpora with a planted user-interest structure.

Products belong to latent interest clusters that are invisible in their text
and categories; users buy mostly inside one home cluster. Only behavior
(who bought what together) reveals the clusters, so a model that exploits
co-purchase structure should rank better than one that does not.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import DAY, ReviewRecord


@dataclass(frozen=True)
class PlantedSpec:
    n_users: int = 2000
    n_products: int = 1000
    n_clusters: int = 10
    p_in_cluster: float = 0.9
    n_categories: int = 20
    words_per_category: int = 6
    generic_words: int = 200
    review_length: int = 8
    min_sequences: int = 3
    max_sequences: int = 5
    min_seq_len: int = 1
    max_seq_len: int = 3
    popularity_exponent: float = 1.0
    sequence_gap_days: tuple[int, int] = (20, 60)
    inner_gap_hours: tuple[int, int] = (1, 72)


def planted_corpus(spec: PlantedSpec = PlantedSpec(), seed: int = 0):
    """Generate ``(records, clusters)`` where ``clusters[p]`` is product p's latent cluster."""
    rng = np.random.default_rng(seed)
    clusters = rng.permutation(np.arange(spec.n_products) % spec.n_clusters)
    categories = rng.integers(0, spec.n_categories, size=spec.n_products)
    members = [np.flatnonzero(clusters == c) for c in range(spec.n_clusters)]
    popularity = []
    for m in members:
        w = 1.0 / np.arange(1, len(m) + 1) ** spec.popularity_exponent
        popularity.append(rng.permutation(w / w.sum()))

    cat_words = [[f"c{c}w{j}" for j in range(spec.words_per_category)] for c in range(spec.n_categories)]
    generic = [f"g{j}" for j in range(spec.generic_words)]
    paths = [("Shop", f"Aisle {c % 5}", f"Kind {c}") for c in range(spec.n_categories)]

    def review(p):
        half = spec.review_length // 2
        own = rng.choice(cat_words[categories[p]], size=half)
        other = rng.choice(generic, size=spec.review_length - half)
        return " ".join(np.concatenate([own, other]))

    records = []
    for u in range(spec.n_users):
        home = rng.integers(spec.n_clusters)
        t = int(rng.integers(0, 365)) * DAY
        for _ in range(rng.integers(spec.min_sequences, spec.max_sequences + 1)):
            for _ in range(rng.integers(spec.min_seq_len, spec.max_seq_len + 1)):
                c = home if rng.random() < spec.p_in_cluster else rng.integers(spec.n_clusters)
                p = int(rng.choice(members[c], p=popularity[c]))
                records.append(ReviewRecord(f"u{u:05d}", f"p{p:05d}", t, review(p), paths[categories[p]]))
                t += int(rng.integers(*spec.inner_gap_hours)) * 3600
            t += int(rng.integers(*spec.sequence_gap_days)) * DAY
    return records, clusters
