"""Directed graph container with dual CSC/CSR views and aggregation weights.

The graph is immutable after construction.  Edges are kept in a canonical
order, sorted by (destination, source); the CSC arrays follow that order
directly and the CSR arrays carry a permutation back into it so that
per-edge weights have a single authoritative copy.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import GraphFormatError, GraphParseError

_CACHE_MAGIC = b"HTG1"


# ======================================================================
# Core container
# ======================================================================

@dataclass(frozen=True, eq=False)
class Graph:
    """Directed multigraph over vertices 0 .. num_vertices-1.

    Attributes:
        num_vertices: vertex count (ids are dense).
        csc_offsets:  int64, len V+1; in-edges of v sit in
                      [csc_offsets[v], csc_offsets[v+1]) of csc_sources.
        csc_sources:  int64, len E; edge sources in canonical
                      (destination, source) order.
        csr_offsets:  int64, len V+1; out-edges of u analogously.
        csr_targets:  int64, len E; edge destinations in (source,
                      destination) order.
        csr_edge_perm: int64, len E; position in CSR order -> position in
                      canonical (CSC) order.
        edge_weights: float64, len E; aggregation weights d_uv in
                      canonical order.
    """

    num_vertices: int
    csc_offsets: np.ndarray
    csc_sources: np.ndarray
    csr_offsets: np.ndarray
    csr_targets: np.ndarray
    csr_edge_perm: np.ndarray
    edge_weights: np.ndarray

    def __post_init__(self):
        for name in ("csc_offsets", "csc_sources", "csr_offsets",
                     "csr_targets", "csr_edge_perm", "edge_weights"):
            getattr(self, name).setflags(write=False)

    @property
    def num_edges(self) -> int:
        return int(self.csc_sources.shape[0])

    def in_degrees(self) -> np.ndarray:
        return np.diff(self.csc_offsets)

    def out_degrees(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    def edge_destinations(self) -> np.ndarray:
        """Destination of every edge in canonical order."""
        return np.repeat(
            np.arange(self.num_vertices, dtype=np.int64), self.in_degrees()
        )

    def edges(self) -> np.ndarray:
        """(E, 2) array of (source, destination) pairs in canonical order."""
        return np.column_stack((self.csc_sources, self.edge_destinations()))

    def content_hash(self) -> str:
        """Stable hex digest of the topology (used to pin artifacts)."""
        h = hashlib.sha256()
        h.update(struct.pack("<Q", self.num_vertices))
        h.update(np.ascontiguousarray(self.csc_offsets).tobytes())
        h.update(np.ascontiguousarray(self.csc_sources).tobytes())
        return h.hexdigest()


# ======================================================================
# Construction
# ======================================================================

def from_edges(sources: np.ndarray, destinations: np.ndarray,
               num_vertices: int | None = None) -> Graph:
    """Build a Graph from parallel source/destination arrays.

    Duplicate edges and self-loops are kept as-is.  num_vertices defaults
    to 1 + the largest vertex id referenced.
    """
    src = np.asarray(sources, dtype=np.int64).ravel()
    dst = np.asarray(destinations, dtype=np.int64).ravel()
    if src.shape != dst.shape:
        raise GraphParseError("source and destination arrays differ in length")
    if src.size and (src.min() < 0 or dst.min() < 0):
        raise GraphParseError("vertex ids must be non-negative")

    if num_vertices is None:
        if src.size == 0:
            raise GraphParseError("cannot infer vertex count from an empty edge set")
        num_vertices = int(max(src.max(), dst.max())) + 1
    elif src.size and int(max(src.max(), dst.max())) >= num_vertices:
        raise GraphParseError("edge references a vertex id beyond num_vertices")

    order = np.lexsort((src, dst))          # canonical: by (dst, src)
    csc_sources = src[order]
    indeg = np.bincount(dst, minlength=num_vertices).astype(np.int64)
    csc_offsets = np.concatenate(([0], np.cumsum(indeg))).astype(np.int64)

    order_csr = np.lexsort((dst, src))
    csr_targets = dst[order_csr]
    outdeg = np.bincount(src, minlength=num_vertices).astype(np.int64)
    csr_offsets = np.concatenate(([0], np.cumsum(outdeg))).astype(np.int64)

    # Map CSR edge positions back to canonical positions.
    inv_canonical = np.empty_like(order)
    inv_canonical[order] = np.arange(order.size, dtype=np.int64)
    csr_edge_perm = inv_canonical[order_csr]

    g = Graph(
        num_vertices=int(num_vertices),
        csc_offsets=csc_offsets,
        csc_sources=csc_sources,
        csr_offsets=csr_offsets,
        csr_targets=csr_targets,
        csr_edge_perm=csr_edge_perm,
        edge_weights=np.empty(0),
    )
    object.__setattr__(g, "edge_weights", gcn_edge_weights(g))
    g.edge_weights.setflags(write=False)
    return g


def gcn_edge_weights(g: Graph) -> np.ndarray:
    """Symmetric-normalized aggregation weights, canonical edge order.

    d_uv = 1 / sqrt((1 + indeg(u)) * (1 + indeg(v))).  The +1 smoothing
    keeps weights finite for zero-in-degree sources, so every weight lies
    in (0, 1].
    """
    indeg = g.in_degrees().astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(1.0 + indeg)
    return inv_sqrt[g.csc_sources] * inv_sqrt[g.edge_destinations()]


# ======================================================================
# Edge-list text files
# ======================================================================

def load_edge_list(path: str) -> Graph:
    """Parse a whitespace-separated "src dst" file into a Graph.

    Lines starting with '#' and blank lines are skipped.  A malformed
    line raises GraphParseError naming the 1-based line number.  The file
    must be pre-densified: if more than half of the ids in
    0..max_id are never referenced, the input is rejected.
    """
    srcs: list[int] = []
    dsts: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 2:
                raise GraphParseError(
                    f"{path}:{lineno}: expected 'src dst', got {stripped!r}"
                )
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphParseError(
                    f"{path}:{lineno}: non-integer vertex id in {stripped!r}"
                ) from None
            if u < 0 or v < 0:
                raise GraphParseError(
                    f"{path}:{lineno}: negative vertex id in {stripped!r}"
                )
            srcs.append(u)
            dsts.append(v)

    if not srcs:
        raise GraphParseError(f"{path}: no edges found")

    src = np.asarray(srcs, dtype=np.int64)
    dst = np.asarray(dsts, dtype=np.int64)
    num_vertices = int(max(src.max(), dst.max())) + 1
    used = np.zeros(num_vertices, dtype=bool)
    used[src] = True
    used[dst] = True
    n_unused = int(num_vertices - used.sum())
    if n_unused * 2 > num_vertices:
        raise GraphParseError(
            f"{path}: {n_unused} of {num_vertices} vertex ids are never "
            f"referenced; densify ids before loading"
        )
    return from_edges(src, dst, num_vertices)


# ======================================================================
# Binary cache
# ======================================================================

def save_graph_cache(g: Graph, path: str) -> None:
    """Write the binary cache: magic, 64-bit counts, then the five arrays."""
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<QQ", g.num_vertices, g.num_edges))
        fh.write(g.csc_offsets.astype("<i8").tobytes())
        fh.write(g.csc_sources.astype("<i8").tobytes())
        fh.write(g.csr_offsets.astype("<i8").tobytes())
        fh.write(g.csr_targets.astype("<i8").tobytes())
        fh.write(g.edge_weights.astype("<f8").tobytes())


def load_graph_cache(path: str) -> Graph:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CACHE_MAGIC:
            raise GraphFormatError(
                f"{path}: bad magic {magic!r}, expected {_CACHE_MAGIC!r}"
            )
        header = fh.read(16)
        if len(header) != 16:
            raise GraphFormatError(f"{path}: truncated header")
        num_vertices, num_edges = struct.unpack("<QQ", header)

        def read_array(count: int, dtype: str) -> np.ndarray:
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise GraphFormatError(f"{path}: truncated array payload")
            return np.frombuffer(raw, dtype=dtype).copy()

        csc_offsets = read_array(num_vertices + 1, "<i8")
        csc_sources = read_array(num_edges, "<i8")
        csr_offsets = read_array(num_vertices + 1, "<i8")
        csr_targets = read_array(num_edges, "<i8")
        weights = read_array(num_edges, "<f8")
        if fh.read(1):
            raise GraphFormatError(f"{path}: trailing bytes after payload")

    # The permutation is cheap to rebuild and keeping it out of the file
    # makes the format easier for other tooling to consume.
    dst_per_edge = np.repeat(
        np.arange(num_vertices, dtype=np.int64), np.diff(csc_offsets)
    )
    order_csr = np.lexsort((dst_per_edge, csc_sources))
    csr_edge_perm = order_csr.astype(np.int64)
    g = Graph(
        num_vertices=int(num_vertices),
        csc_offsets=csc_offsets,
        csc_sources=csc_sources,
        csr_offsets=csr_offsets,
        csr_targets=csr_targets,
        csr_edge_perm=csr_edge_perm,
        edge_weights=weights,
    )
    return g
