"""Two-level graph partitioning: locality partitions, then in-edge-balanced chunks.

Level 1 assigns every vertex to one of m partitions with a seeded
streaming heuristic (linear deterministic greedy) followed by a single
refinement sweep.  Level 2 cuts each partition's vertices, in ascending
id order, into n contiguous chunks whose in-edge counts are balanced by
a greedy prefix-sum rule.  A chunk owns its vertices as aggregation
destinations; the sources it needs form its neighbor set.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import PartitionError
from .graph import Graph

# ======================================================================
# Types
# ======================================================================


@dataclass(frozen=True, eq=False)
class PartitionAssignment:
    """Vertex -> partition map for m partitions."""

    owner: np.ndarray  # int64, len V, values in [0, m)
    m: int

    def __post_init__(self):
        self.owner.setflags(write=False)
        if self.owner.size and (self.owner.min() < 0 or self.owner.max() >= self.m):
            raise PartitionError("owner ids out of range")

    def sizes(self) -> np.ndarray:
        return np.bincount(self.owner, minlength=self.m).astype(np.int64)


@dataclass(eq=False)
class ChunkSubgraph:
    """One chunk: a destination vertex range plus its in-edge structure.

    vertices      global destination ids, ascending.
    sources       global ids of all in-edge sources (the neighbor set N_ij),
                  sorted ascending, deduplicated.
    csc_offsets   len |vertices|+1; in-edges of vertices[k] occupy
                  [csc_offsets[k], csc_offsets[k+1]) in the edge arrays.
    csc_local_src per-edge index into `sources`, chunk-canonical order
                  (ascending global destination, then global source).
    edge_weights  d_uv per edge, chunk-canonical order.
    csr_offsets / csr_local_dst / csr_edge_perm
                  transpose view grouped by local source, for backward
                  scatter; csr_edge_perm maps CSR position -> canonical.
    """

    partition_id: int
    chunk_id: int
    vertices: np.ndarray
    sources: np.ndarray
    csc_offsets: np.ndarray
    csc_local_src: np.ndarray
    edge_weights: np.ndarray
    csr_offsets: np.ndarray
    csr_local_dst: np.ndarray
    csr_edge_perm: np.ndarray

    @property
    def num_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.csc_local_src.shape[0])


@dataclass(eq=False)
class TwoLevelPartition:
    """m x n grid of chunks; chunks[i][j] runs on device i in batch j."""

    m: int
    n: int
    assignment: PartitionAssignment
    chunks: list  # list[list[ChunkSubgraph]]

    def neighbor_sets(self) -> list:
        return [[c.sources for c in row] for row in self.chunks]

    def dest_sets(self) -> list:
        return [[c.vertices for c in row] for row in self.chunks]


# ======================================================================
# Level 1: streaming partitioner
# ======================================================================


def _undirected_adjacency(g: Graph):
    """Per-vertex neighbor lists merging in- and out-edges (self-loops dropped).

    Returns (offsets, indices); duplicates from antiparallel edge pairs
    are kept, which only scales affinity scores.
    """
    dst_per_edge = g.edge_destinations()
    src_per_edge_csr = np.repeat(np.arange(g.num_vertices, dtype=np.int64),
                                 g.out_degrees())
    keep_in = g.csc_sources != dst_per_edge
    keep_out = g.csr_targets != src_per_edge_csr

    at = np.concatenate((dst_per_edge[keep_in], src_per_edge_csr[keep_out]))
    nbr = np.concatenate((g.csc_sources[keep_in], g.csr_targets[keep_out]))
    order = np.argsort(at, kind="stable")
    indices = nbr[order]
    deg = np.bincount(at, minlength=g.num_vertices)
    offsets = np.concatenate(([0], np.cumsum(deg))).astype(np.int64)
    return offsets, indices


def balance_capacity(num_vertices: int, m: int, epsilon: float) -> int:
    """Per-partition vertex cap: (1+epsilon)|V|/m, floored, but never below
    the feasibility minimum ceil(|V|/m)."""
    return max(
        math.ceil(num_vertices / m),
        math.floor((1.0 + epsilon) * num_vertices / m + 1e-12),
    )


def partition_vertices(
    g: Graph, m: int, epsilon: float = 0.1, seed: int = 0
) -> PartitionAssignment:
    """Seeded streaming partition with one refinement sweep.

    Vertices arrive in a seeded random order; each goes to the eligible
    partition maximizing |N(v) cap P_i| * (1 - |P_i|/cap).  Ties break by
    smaller current size, then smaller partition id.  The refinement
    sweep (ascending vertex id) moves a vertex when doing so strictly
    increases its same-partition neighbor count without breaking balance.
    """
    V = g.num_vertices
    if m < 1:
        raise PartitionError(f"m must be positive, got {m}")
    if m > V:
        raise PartitionError(f"m={m} exceeds the vertex count {V}")
    if epsilon < 0:
        raise PartitionError(f"epsilon must be non-negative, got {epsilon}")

    cap = balance_capacity(V, m, epsilon)
    offsets, indices = _undirected_adjacency(g)
    rng = np.random.default_rng(seed)
    order = rng.permutation(V)

    owner = np.full(V, -1, dtype=np.int64)
    sizes = np.zeros(m, dtype=np.int64)
    part_ids = np.arange(m)

    for v in order:
        nbrs = indices[offsets[v]: offsets[v + 1]]
        placed = owner[nbrs]
        placed = placed[placed >= 0]
        if placed.size:
            counts = np.bincount(placed, minlength=m)
        else:
            counts = np.zeros(m, dtype=np.int64)
        scores = counts * (1.0 - sizes / cap)
        eligible = np.flatnonzero(sizes < cap)
        pick = eligible[np.lexsort(
            (eligible, sizes[eligible], -scores[eligible])
        )[0]]
        owner[v] = pick
        sizes[pick] += 1

    _repair_empty(owner, sizes, offsets, indices, m)

    # ---- one refinement sweep ----
    for v in range(V):
        nbrs = indices[offsets[v]: offsets[v + 1]]
        if nbrs.size == 0:
            continue
        cur = int(owner[v])
        if sizes[cur] <= 1:
            continue
        counts = np.bincount(owner[nbrs], minlength=m)
        movable = (part_ids == cur) | (sizes < cap)
        masked = np.where(movable, counts, -1)
        best = int(np.argmax(masked))  # argmax takes the smallest id on ties
        if masked[best] > counts[cur] and best != cur:
            owner[v] = best
            sizes[cur] -= 1
            sizes[best] += 1

    _repair_empty(owner, sizes, offsets, indices, m)
    return PartitionAssignment(owner=owner, m=m)


def _repair_empty(owner, sizes, offsets, indices, m) -> None:
    """Guarantee every partition holds at least one vertex (deterministic)."""
    deg = np.diff(offsets)
    while (sizes == 0).any():
        empty = int(np.flatnonzero(sizes == 0)[0])
        donor = int(np.argmax(sizes))
        members = np.flatnonzero(owner == donor)
        v = int(members[np.argmin(deg[members])])
        owner[v] = empty
        sizes[donor] -= 1
        sizes[empty] += 1


def edge_cut(g: Graph, assignment: PartitionAssignment) -> int:
    """Number of directed edges whose endpoints land in different partitions."""
    src_owner = assignment.owner[g.csc_sources]
    dst_owner = assignment.owner[g.edge_destinations()]
    return int((src_owner != dst_owner).sum())


# ======================================================================
# Level 2: chunk splitting
# ======================================================================


def _ranges_concat(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenate [s, s+c) ranges without a Python loop."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    rank = np.arange(total, dtype=np.int64) - np.repeat(
        np.concatenate(([0], np.cumsum(counts)[:-1])), counts
    )
    return np.repeat(starts, counts) + rank


def chunk_from_vertices(
    g: Graph, vertices: np.ndarray, partition_id: int, chunk_id: int
) -> ChunkSubgraph:
    """Assemble the in-edge subgraph owned by the given destination vertices."""
    verts = np.asarray(vertices, dtype=np.int64)
    counts = g.csc_offsets[verts + 1] - g.csc_offsets[verts]
    edge_pos = _ranges_concat(g.csc_offsets[verts], counts)

    src_global = g.csc_sources[edge_pos]
    weights = g.edge_weights[edge_pos]
    dst_local = np.repeat(np.arange(verts.size, dtype=np.int64), counts)
    sources = np.unique(src_global)
    src_local = np.searchsorted(sources, src_global)

    csc_offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)

    order = np.lexsort((dst_local, src_local))
    csr_local_dst = dst_local[order]
    per_src = np.bincount(src_local, minlength=sources.size)
    csr_offsets = np.concatenate(([0], np.cumsum(per_src))).astype(np.int64)

    return ChunkSubgraph(
        partition_id=partition_id,
        chunk_id=chunk_id,
        vertices=verts,
        sources=sources,
        csc_offsets=csc_offsets,
        csc_local_src=src_local.astype(np.int64),
        edge_weights=weights,
        csr_offsets=csr_offsets,
        csr_local_dst=csr_local_dst,
        csr_edge_perm=order.astype(np.int64),
    )


def split_ranges(in_degrees: np.ndarray, n: int) -> list:
    """Greedy prefix-sum split of a degree sequence into n contiguous ranges.

    Chunk k closes at the first vertex where the cumulative in-edge count
    reaches (k+1)/n of the total, never leaving a later chunk without a
    vertex.  Returns [(start, end), ...] index pairs.
    """
    size = int(in_degrees.shape[0])
    prefix = np.cumsum(in_degrees)
    total = int(prefix[-1]) if size else 0
    ranges = []
    start = 0
    for c in range(n):
        remaining = n - c
        if c == n - 1:
            end = size
        else:
            target = (c + 1) * total / n
            end = int(np.searchsorted(prefix, target, side="left")) + 1
            end = max(end, start + 1)
            end = min(end, size - (remaining - 1))
        ranges.append((start, end))
        start = end
    return ranges


def split_chunks(g: Graph, assignment: PartitionAssignment, n: int) -> TwoLevelPartition:
    """Cut each partition into n destination chunks balanced on in-edges."""
    if n < 1:
        raise PartitionError(f"n must be positive, got {n}")
    indeg = g.in_degrees()
    rows = []
    for i in range(assignment.m):
        owned = np.flatnonzero(assignment.owner == i).astype(np.int64)
        if n > owned.size:
            raise PartitionError(
                f"partition {i} has {owned.size} vertices, cannot split "
                f"into {n} chunks"
            )
        ranges = split_ranges(indeg[owned], n)
        rows.append([
            chunk_from_vertices(g, owned[s:e], i, j)
            for j, (s, e) in enumerate(ranges)
        ])
    return TwoLevelPartition(m=assignment.m, n=n, assignment=assignment, chunks=rows)


def two_level_from_ranges(
    g: Graph, assignment: PartitionAssignment, chunk_ranges: list
) -> TwoLevelPartition:
    """Rebuild a chunk grid from explicit per-partition index ranges.

    chunk_ranges[i] lists (start, end) pairs indexing the ascending owned
    vertex list of partition i.  Used by artifact loading and fixtures.
    """
    m = assignment.m
    if len(chunk_ranges) != m:
        raise PartitionError("chunk_ranges must have one row per partition")
    n = len(chunk_ranges[0])
    rows = []
    for i in range(m):
        if len(chunk_ranges[i]) != n:
            raise PartitionError("all partitions must have the same chunk count")
        owned = np.flatnonzero(assignment.owner == i).astype(np.int64)
        covered = 0
        row = []
        for j, (s, e) in enumerate(chunk_ranges[i]):
            if s != covered or e < s or e > owned.size:
                raise PartitionError(
                    f"chunk ranges of partition {i} must tile [0, {owned.size})"
                )
            covered = e
            row.append(chunk_from_vertices(g, owned[s:e], i, j))
        if covered != owned.size:
            raise PartitionError(
                f"chunk ranges of partition {i} must tile [0, {owned.size})"
            )
        rows.append(row)
    return TwoLevelPartition(m=m, n=n, assignment=assignment, chunks=rows)


# ======================================================================
# Derived quantities
# ======================================================================


def neighbor_sets(p: TwoLevelPartition) -> list:
    """N_ij per chunk: sorted global source ids."""
    return p.neighbor_sets()


def replication_factor(p: TwoLevelPartition) -> float:
    """alpha = sum_ij |N_ij| / |V|."""
    V = p.assignment.owner.shape[0]
    if V == 0:
        raise PartitionError("replication factor undefined for an empty graph")
    total = sum(int(c.sources.size) for row in p.chunks for c in row)
    return total / V


# ======================================================================
# Partition artifacts
# ======================================================================

_PARTITION_FORMAT = "chunktrain-partition-v1"


def _ranges_of(p: TwoLevelPartition) -> list:
    """Recover per-partition (start, end) index ranges from chunk vertices."""
    out = []
    for i, row in enumerate(p.chunks):
        start = 0
        pairs = []
        for c in row:
            pairs.append([start, start + c.num_vertices])
            start += c.num_vertices
        out.append(pairs)
    return out


def partition_content_hash(p: TwoLevelPartition) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(p.assignment.owner).tobytes())
    h.update(json.dumps(_ranges_of(p)).encode())
    return h.hexdigest()


def save_partition(
    p: TwoLevelPartition,
    g: Graph,
    path: str,
    *,
    epsilon: float | None = None,
    seed: int | None = None,
) -> None:
    doc = {
        "format": _PARTITION_FORMAT,
        "graph_hash": g.content_hash(),
        "num_vertices": g.num_vertices,
        "num_edges": g.num_edges,
        "m": p.m,
        "n": p.n,
        "epsilon": epsilon,
        "seed": seed,
        "owner": p.assignment.owner.tolist(),
        "chunk_ranges": _ranges_of(p),
        "neighbor_set_sizes": [[int(c.sources.size) for c in row] for row in p.chunks],
        "replication_factor": replication_factor(p),
        "edge_cut": edge_cut(g, p.assignment),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_partition(path: str, g: Graph) -> TwoLevelPartition:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != _PARTITION_FORMAT:
        raise PartitionError(f"{path}: not a partition dump")
    if doc["graph_hash"] != g.content_hash():
        raise PartitionError(
            f"{path}: partition was computed for a different graph "
            f"(stale hash); re-run partitioning"
        )
    assignment = PartitionAssignment(
        owner=np.asarray(doc["owner"], dtype=np.int64), m=int(doc["m"])
    )
    return two_level_from_ranges(g, assignment, doc["chunk_ranges"])
