"""Successive behavior graph and parameter-free jumping graph convolution.

Nodes are ordered products first (``0..n_products-1``) followed by training
sequences. The propagation operator is ``F = w*I + (1-w) * D^-1 A``; rows of
isolated nodes are identity rows so cold products keep their own embedding.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class PropagationConfig:
    omega: float = 0.1
    beta: float = 0.1
    layers: int = 4

    def __post_init__(self):
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must be in [0, 1], got {self.omega}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if int(self.layers) != self.layers or self.layers < 0:
            raise ValueError(f"layers must be a non-negative integer, got {self.layers}")


@dataclass
class BehaviorGraph:
    n_products: int
    n_sequences: int
    edge_products: np.ndarray
    edge_sequences: np.ndarray
    _ops: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = self.n_nodes
        rows = np.concatenate([self.edge_products, self.n_products + self.edge_sequences])
        cols = np.concatenate([self.n_products + self.edge_sequences, self.edge_products])
        self.adjacency = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        self.degrees = np.asarray(self.adjacency.sum(axis=1)).ravel()

    @property
    def n_nodes(self) -> int:
        return self.n_products + self.n_sequences

    @property
    def n_edges(self) -> int:
        return len(self.edge_products)

    def operator(self, omega: float, dtype=np.float64) -> sp.csr_matrix:
        """Sparse ``w*I + (1-w) D^-1 A`` with identity rows for isolated nodes."""
        dtype = np.dtype(dtype)
        key = ("F", float(omega), dtype)
        if key not in self._ops:
            deg = self.degrees
            inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
            diag = np.where(deg > 0, omega, 1.0)
            F = sp.diags(diag) + (1.0 - omega) * sp.diags(inv) @ self.adjacency
            self._ops[key] = F.tocsr().astype(dtype)
            self._ops[("FT", float(omega), dtype)] = F.T.tocsr().astype(dtype)
        return self._ops[key]

    def operator_transpose(self, omega: float, dtype=np.float64) -> sp.csr_matrix:
        self.operator(omega, dtype)
        return self._ops[("FT", float(omega), np.dtype(dtype))]

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"{self.n_products} {self.n_sequences} {self.n_edges}".encode())
        h.update(self.edge_products.astype("<i8").tobytes())
        h.update(self.edge_sequences.astype("<i8").tobytes())
        return h.hexdigest()[:16]


@dataclass
class EnrichedEmbeddings:
    matrix: np.ndarray
    config: PropagationConfig
    graph_fingerprint: str

    def products(self, n_products: int) -> np.ndarray:
        return self.matrix[:n_products]


def build_graph(train_sequences, n_products: int) -> BehaviorGraph:
    """One node per training sequence, an unweighted edge per (product, sequence) membership."""
    pairs = set()
    for s_idx, seq in enumerate(train_sequences):
        for it in seq.interactions:
            p = it.product if hasattr(it, "product") else int(it)
            pairs.add((p, s_idx))
    pairs = sorted(pairs)
    ep = np.array([p for p, _ in pairs], dtype=np.int64)
    es = np.array([s for _, s in pairs], dtype=np.int64)
    if len(ep) and ep.max() >= n_products:
        raise ValueError("sequence references a product index >= n_products")
    return BehaviorGraph(n_products, len(train_sequences), ep, es)


def save_graph(graph: BehaviorGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{graph.n_products} {graph.n_sequences} {graph.n_edges}\n")
        for p, s in zip(graph.edge_products, graph.edge_sequences):
            fh.write(f"{p}\t{s}\n")


def load_graph(path) -> BehaviorGraph:
    with open(Path(path)) as fh:
        n_p, n_s, n_e = (int(x) for x in fh.readline().split())
        body = fh.read()
    edges = (np.loadtxt(io.StringIO(body), dtype=np.int64, delimiter="\t", ndmin=2) if body.strip()
             else np.zeros((0, 2), dtype=np.int64))
    if len(edges) != n_e:
        raise ValueError(f"header declares {n_e} edges, found {len(edges)}")
    return BehaviorGraph(n_p, n_s, edges[:, 0].copy(), edges[:, 1].copy())


def _float(H):
    return H.dtype if H.dtype in (np.float32, np.float64) else np.float64


def _check(graph: BehaviorGraph, H: np.ndarray):
    if H.shape[0] != graph.n_nodes:
        raise ValueError(f"H has {H.shape[0]} rows, graph has {graph.n_nodes} nodes")


def propagate_once(graph: BehaviorGraph, H: np.ndarray, omega: float) -> np.ndarray:
    _check(graph, H)
    return graph.operator(omega, _float(H)) @ H


def jumping_propagate(graph: BehaviorGraph, H0: np.ndarray, config: PropagationConfig) -> EnrichedEmbeddings:
    """Stack ``config.layers`` jumping convolutions, re-injecting ``H0`` with weight beta."""
    _check(graph, H0)
    if not np.all(np.isfinite(H0)):
        raise ValueError("H0 contains non-finite values")
    F = graph.operator(config.omega, _float(H0))
    b = config.beta
    H = H0
    for _ in range(config.layers):
        H = F @ (b * H0 + (1.0 - b) * H)
    return EnrichedEmbeddings(np.asarray(H), config, graph.fingerprint())


def jumping_backward(graph: BehaviorGraph, grad_out: np.ndarray, config: PropagationConfig) -> np.ndarray:
    """Gradient w.r.t. ``H0`` given the gradient w.r.t. the final layer output.

    The layers are linear, so this is the same recursion run with ``F^T``.
    """
    FT = graph.operator_transpose(config.omega, _float(grad_out))
    b = config.beta
    g = grad_out
    dH0 = np.zeros_like(grad_out)
    for _ in range(config.layers):
        x = FT @ g
        dH0 += b * x
        g = (1.0 - b) * x
    return dH0 + g


def closed_form_propagate(graph: BehaviorGraph, H0: np.ndarray, config: PropagationConfig) -> np.ndarray:
    """Evaluate ``((1-b)^L F^L + b * sum_k (1-b)^(k-1) F^k) H0`` by accumulating ``F^k H0``."""
    _check(graph, H0)
    if not np.all(np.isfinite(H0)):
        raise ValueError("H0 contains non-finite values")
    L, b = config.layers, config.beta
    if L == 0:
        return H0.copy()
    F = graph.operator(config.omega)
    X = H0
    acc = np.zeros_like(H0, dtype=np.result_type(H0, np.float64))
    for k in range(1, L + 1):
        X = F @ X
        acc += b * (1.0 - b) ** (k - 1) * X
    return acc + (1.0 - b) ** L * X


def diversity(graph: BehaviorGraph, H: np.ndarray) -> float:
    """Sum of ``a_ij * ||H_i - H_j||^2`` over ordered node pairs."""
    _check(graph, H)
    diff = H[graph.edge_products] - H[graph.n_products + graph.edge_sequences]
    return float(2.0 * np.sum(diff.astype(np.float64) ** 2))


# ---------------------------------------------------------------------------
# over-smoothing diagnostics


def g_coefficient(lam, omega, l):
    """Per-eigenvalue gain of ``l`` plain convolutions."""
    return (1.0 - (1.0 - omega) * np.asarray(lam, dtype=np.float64)) ** l


def f_coefficient(lam, omega, beta, l):
    """Per-eigenvalue gain of ``l`` jumping convolutions."""
    acc = (1.0 - beta) ** l * g_coefficient(lam, omega, l)
    for k in range(1, l + 1):
        acc = acc + beta * (1.0 - beta) ** (k - 1) * g_coefficient(lam, omega, k)
    return acc


def f_limit(lam, omega, beta):
    """Limit of the jumping gain as the number of layers grows."""
    m = 1.0 - (1.0 - omega) * np.asarray(lam, dtype=np.float64)
    return beta * m / (1.0 - (1.0 - beta) * m)


@dataclass
class SpectralReport:
    eigenvalues: np.ndarray
    limit_coefficients: np.ndarray
    omega: float
    beta: float
    limit_diversity: float | None = None


def _sym_laplacian(graph: BehaviorGraph, cap: int):
    if graph.n_nodes > cap:
        raise ValueError(f"graph has {graph.n_nodes} nodes, above the spectral cap of {cap}")
    deg = graph.degrees
    inv_sqrt = np.divide(1.0, np.sqrt(deg), out=np.zeros_like(deg), where=deg > 0)
    A = graph.adjacency.toarray()
    Lsym = np.diag((deg > 0).astype(float)) - inv_sqrt[:, None] * A * inv_sqrt[None, :]
    lam, V = np.linalg.eigh(Lsym)
    return lam, V


def spectral_diagnostics(graph: BehaviorGraph, omega: float = 0.1, beta: float = 0.1,
                         H0: np.ndarray | None = None, cap: int = 2000) -> SpectralReport:
    """Eigenvalues of ``I - D^-1 A`` and the per-eigenvalue jumping limit.

    ``D^-1 A`` is similar to ``D^-1/2 A D^-1/2`` so the spectrum is taken from
    the symmetric form. When ``H0`` is given, the limiting diversity of the
    jumping convolution is returned as well.
    """
    lam, V = _sym_laplacian(graph, cap)
    coef = f_limit(lam, omega, beta)
    limit = None
    if H0 is not None:
        _check(graph, H0)
        c = V.T @ (np.sqrt(graph.degrees)[:, None] * H0)
        limit = float(2.0 * np.sum(lam[:, None] * coef[:, None] ** 2 * c ** 2))
    return SpectralReport(lam, coef, omega, beta, limit)


def spectral_diversity(graph: BehaviorGraph, H0: np.ndarray, omega: float, beta: float,
                       layers: int, cap: int = 2000) -> float:
    """Diversity after ``layers`` convolutions computed in the eigenbasis (oracle path)."""
    lam, V = _sym_laplacian(graph, cap)
    c = V.T @ (np.sqrt(graph.degrees)[:, None] * H0)
    gain = f_coefficient(lam, omega, beta, layers)
    return float(2.0 * np.sum(lam[:, None] * gain[:, None] ** 2 * c ** 2))


@dataclass
class TheoremReport:
    omega: float
    beta: float
    layers: list[int]
    jump_diversity: list[float]
    plain_diversity: list[float]
    violations: list[int]
    status: str
    initial_diversity: float

    @property
    def tail(self) -> float:
        return self.jump_diversity[-1]

    def rows(self):
        for l, dj, dp in zip(self.layers, self.jump_diversity, self.plain_diversity):
            yield {"layer": l, "omega": self.omega, "beta": self.beta,
                   "omega_jump_diversity": dj, "omega_plain_diversity": dp}


def verify_theorem1(graph: BehaviorGraph, H0: np.ndarray, omega: float, beta: float,
                    max_layers: int, layers=None) -> TheoremReport:
    """Compare diversity with and without jumping connections layer by layer.

    A violation is any layer where the jumping output is not strictly more
    diverse than plain propagation. Inputs outside ``omega in (0.5, 1)``,
    ``beta in (0, 1)`` or with zero initial diversity are still computed but
    reported with status ``"theorem hypotheses unmet"``.
    """
    H0 = np.asarray(H0, dtype=np.float64)
    _check(graph, H0)
    d0 = diversity(graph, H0)
    ok = 0.5 < omega < 1.0 and 0.0 < beta < 1.0 and d0 > 0
    wanted = set(range(1, max_layers + 1) if layers is None else layers)

    F = graph.operator(omega)
    plain, jump = H0, H0
    ls, dj, dp, bad = [], [], [], []
    for l in range(1, max_layers + 1):
        plain = F @ plain
        jump = F @ (beta * H0 + (1.0 - beta) * jump)
        if l in wanted:
            a, b = diversity(graph, jump), diversity(graph, plain)
            ls.append(l)
            dj.append(a)
            dp.append(b)
            if a <= b:
                bad.append(l)
    status = "ok" if ok else "theorem hypotheses unmet"
    if ok and bad:
        status = "violations"
    return TheoremReport(omega, beta, ls, dj, dp, bad, status, d0)
