"""Shared fixtures: a small hand-built grid instance plus random helpers.

The "toy" instance is an 8-vertex, 19-edge graph split into a 3x2 chunk
grid whose transfer volumes are known by hand: naive per-chunk loading
moves 19 rows, per-batch deduplication 11, and cross-batch reuse 8.
"""

import numpy as np
import pytest

from chunktrain import graph, partition, planner


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "acceptance(number, name): headline guarantee checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and report.when == "call":
        report.acceptance = marker.args


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            meta = getattr(rep, "acceptance", None)
            if meta is not None:
                verdict = "PASS" if rep.passed else "FAIL"
                lines.append((meta[0], meta[1], verdict))
    if lines:
        terminalreporter.section("acceptance criteria")
        for number, name, verdict in sorted(lines):
            terminalreporter.write_line(
                f"acceptance {number} {name}: {verdict}")

# destination-grouped edge list (source, destination)
TOY_EDGES = [
    (1, 0), (2, 0), (0, 1), (3, 1),           # chunk (0,0): dst {0,1}
    (4, 2), (3, 2), (2, 3), (5, 3),           # chunk (0,1): dst {2,3}
    (0, 4), (1, 4), (4, 4),                   # chunk (1,0): dst {4}
    (2, 5), (4, 5), (5, 5), (6, 5),           # chunk (1,1): dst {5}
    (3, 6), (4, 6), (7, 6),                   # chunk (2,0): dst {6}
    (3, 7),                                   # chunk (2,1): dst {7}
]
TOY_OWNER = np.array([0, 0, 0, 0, 1, 1, 2, 2], dtype=np.int64)
TOY_RANGES = [
    [(0, 2), (2, 4)],
    [(0, 1), (1, 2)],
    [(0, 1), (1, 2)],
]
TOY_VOLUMES = (19, 11, 8)


@pytest.fixture
def toy_graph():
    src = np.array([e[0] for e in TOY_EDGES], dtype=np.int64)
    dst = np.array([e[1] for e in TOY_EDGES], dtype=np.int64)
    return graph.from_edges(src, dst, num_vertices=8)


@pytest.fixture
def toy_partition(toy_graph):
    assignment = partition.PartitionAssignment(owner=TOY_OWNER.copy(), m=3)
    return partition.two_level_from_ranges(toy_graph, assignment, TOY_RANGES)


@pytest.fixture
def toy_plan(toy_partition):
    return planner.plan_for_partition(toy_partition)


# ----------------------------------------------------------------------
# random-instance helpers
# ----------------------------------------------------------------------


def random_graph(rng, num_vertices=None, num_edges=None):
    """Random directed multigraph (may include self-loops)."""
    V = int(rng.integers(4, 40)) if num_vertices is None else num_vertices
    E = int(rng.integers(V, 6 * V)) if num_edges is None else num_edges
    src = rng.integers(0, V, size=E)
    dst = rng.integers(0, V, size=E)
    return graph.from_edges(src, dst, num_vertices=V)


def random_two_level(g, rng, m, n):
    """Balanced random owner map split into n chunks per partition."""
    owner = rng.permutation(np.arange(g.num_vertices, dtype=np.int64) % m)
    assignment = partition.PartitionAssignment(owner=owner, m=m)
    return partition.split_chunks(g, assignment, n)


def random_set_instance(rng, m, n, universe):
    """Random neighbor sets + owner map over a fixed vertex universe."""
    owner = rng.integers(0, m, size=universe)
    nbrs = []
    for _i in range(m):
        row = []
        for _j in range(n):
            k = int(rng.integers(0, max(2, universe // 2)))
            row.append(np.unique(rng.integers(0, universe, size=k)))
        nbrs.append(row)
    return nbrs, owner
