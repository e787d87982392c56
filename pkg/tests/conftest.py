import numpy as np
import pytest

from behavior_search.graph import BehaviorGraph


def random_bipartite(rng, n_products, n_sequences, p=0.4, connected=True):
    """Random product/sequence graph; when ``connected`` a spanning path is added."""
    mask = rng.random((n_products, n_sequences)) < p
    if connected:
        # zig-zag p0-s0-p1-s1-... touches every node once
        for k in range(max(n_products, n_sequences)):
            mask[min(k, n_products - 1), min(k, n_sequences - 1)] = True
            if k + 1 < n_products:
                mask[k + 1, min(k, n_sequences - 1)] = True
    ep, es = np.nonzero(mask)
    return BehaviorGraph(n_products, n_sequences, ep, es)


def dense_operator(graph, omega):
    """Dense ``omega*I + (1-omega) D^-1 A`` with identity rows for isolated nodes."""
    A = graph.adjacency.toarray()
    deg = A.sum(axis=1)
    P = np.where(deg[:, None] > 0, A / np.maximum(deg, 1)[:, None], np.eye(len(A)))
    return omega * np.eye(len(A)) + (1 - omega) * P


def is_connected(graph):
    from scipy.sparse.csgraph import connected_components

    return connected_components(graph.adjacency, directed=False)[0] == 1


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# PASS/FAIL lines from the acceptance criteria, echoed after the test session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
